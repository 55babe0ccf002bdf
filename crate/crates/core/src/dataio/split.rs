//! Old/new item grouping and the warm-fold protocol.
//!
//! Items with more than `n_old` samples are old; items with more than
//! `n_new` but at most `n_old` are new; the rest are discarded. Each new
//! item's samples are ordered by timestamp (stable, ties by record order)
//! and the first 3·`k_fold` fill warm-a/b/c; the remainder is the test set.
//! Old-item samples split into a pre-training pool and a cold-start-module
//! pool by holding out the most recent `coldstart_holdout` per item.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DataError, InteractionLog, Record};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_old: usize,
    pub n_new: usize,
    pub k_fold: usize,
    /// Most-recent samples held out per old item for training the
    /// cold-start modules. Conventionally twice the episode minibatch size.
    pub coldstart_holdout: usize,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.k_fold == 0 {
            return Err(DataError::InvalidSpec("k_fold must be at least 1".into()));
        }
        if self.n_new < 3 * self.k_fold {
            return Err(DataError::InvalidSpec(format!(
                "n_new ({}) must be at least 3·k_fold ({})",
                self.n_new,
                3 * self.k_fold
            )));
        }
        if self.n_old <= self.n_new {
            return Err(DataError::InvalidSpec(format!(
                "n_old ({}) must exceed n_new ({})",
                self.n_old, self.n_new
            )));
        }
        if self.coldstart_holdout >= self.n_old {
            return Err(DataError::InvalidSpec(format!(
                "coldstart_holdout ({}) must stay below n_old ({})",
                self.coldstart_holdout, self.n_old
            )));
        }
        Ok(())
    }
}

/// The materialized split. Fold maps iterate in item order; flat pools are
/// ordered by (item, timestamp, record order).
#[derive(Debug, Clone)]
pub struct SplitResult {
    pub old_items: Vec<u32>,
    pub new_items: Vec<u32>,
    pub pretrain: Vec<Record>,
    pub coldstart: Vec<Record>,
    pub warm_a: BTreeMap<u32, Vec<Record>>,
    pub warm_b: BTreeMap<u32, Vec<Record>>,
    pub warm_c: BTreeMap<u32, Vec<Record>>,
    pub test: Vec<Record>,
}

impl SplitResult {
    pub fn warm_fold(&self, fold: WarmFold) -> &BTreeMap<u32, Vec<Record>> {
        match fold {
            WarmFold::A => &self.warm_a,
            WarmFold::B => &self.warm_b,
            WarmFold::C => &self.warm_c,
        }
    }

    /// All records of one warm fold, in item order.
    pub fn warm_flat(&self, fold: WarmFold) -> Vec<Record> {
        self.warm_fold(fold).values().flatten().copied().collect()
    }

    pub fn manifest(&self, spec: &SplitSpec) -> SplitManifest {
        SplitManifest {
            schema_version: 1,
            spec: *spec,
            old_items: self.old_items.clone(),
            new_items: self
                .new_items
                .iter()
                .map(|&i| NewItemEntry {
                    item: i,
                    warm_a: self.warm_a[&i].len(),
                    warm_b: self.warm_b[&i].len(),
                    warm_c: self.warm_c[&i].len(),
                    test: self.test.iter().filter(|r| r.item == i).count(),
                })
                .collect(),
            pretrain_samples: self.pretrain.len(),
            coldstart_samples: self.coldstart.len(),
            test_samples: self.test.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarmFold {
    A,
    B,
    C,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct NewItemEntry {
    pub item: u32,
    pub warm_a: usize,
    pub warm_b: usize,
    pub warm_c: usize,
    pub test: usize,
}

/// Audit dump of a split: item assignments and fold sizes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitManifest {
    pub schema_version: u32,
    pub spec: SplitSpec,
    pub old_items: Vec<u32>,
    pub new_items: Vec<NewItemEntry>,
    pub pretrain_samples: usize,
    pub coldstart_samples: usize,
    pub test_samples: usize,
}

pub fn split(log: &InteractionLog, spec: &SplitSpec) -> Result<SplitResult, DataError> {
    spec.validate()?;
    if log.records.is_empty() {
        return Err(DataError::EmptyLog);
    }

    let mut per_item: BTreeMap<u32, Vec<(usize, Record)>> = BTreeMap::new();
    for (idx, r) in log.records.iter().enumerate() {
        per_item.entry(r.item).or_default().push((idx, *r));
    }
    for recs in per_item.values_mut() {
        recs.sort_by_key(|(idx, r)| (r.ts, *idx));
    }

    let mut out = SplitResult {
        old_items: Vec::new(),
        new_items: Vec::new(),
        pretrain: Vec::new(),
        coldstart: Vec::new(),
        warm_a: BTreeMap::new(),
        warm_b: BTreeMap::new(),
        warm_c: BTreeMap::new(),
        test: Vec::new(),
    };

    let k = spec.k_fold;
    for (item, recs) in &per_item {
        let n = recs.len();
        if n > spec.n_old {
            out.old_items.push(*item);
            let cut = n - spec.coldstart_holdout.min(n - 1);
            out.pretrain.extend(recs[..cut].iter().map(|(_, r)| *r));
            out.coldstart.extend(recs[cut..].iter().map(|(_, r)| *r));
        } else if n > spec.n_new {
            out.new_items.push(*item);
            let take = |lo: usize, hi: usize| recs[lo..hi].iter().map(|(_, r)| *r).collect::<Vec<_>>();
            out.warm_a.insert(*item, take(0, k));
            out.warm_b.insert(*item, take(k, 2 * k));
            out.warm_c.insert(*item, take(2 * k, 3 * k));
            out.test.extend(recs[3 * k..].iter().map(|(_, r)| *r));
        }
    }

    if out.old_items.is_empty() {
        return Err(DataError::NoOldItems(spec.n_old));
    }
    if out.new_items.is_empty() {
        return Err(DataError::NoNewItems(spec.n_new, spec.n_old));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::FieldDef;

    fn log_with_counts(counts: &[(u32, usize)]) -> InteractionLog {
        let num_items = counts.iter().map(|&(i, _)| i as usize + 1).max().unwrap();
        let mut records = Vec::new();
        let mut ts = 0i64;
        for &(item, n) in counts {
            for j in 0..n {
                records.push(Record {
                    user: (j % 11) as u32,
                    item,
                    label: (j % 2) as u8,
                    ts,
                });
                ts += 1;
            }
        }
        InteractionLog {
            num_users: 11,
            num_items,
            user_fields: vec![FieldDef { name: "a".into(), vocab: 2 }],
            item_fields: vec![FieldDef { name: "b".into(), vocab: 2 }],
            user_attrs: vec![vec![vec![0]]; 11],
            item_attrs: vec![vec![vec![1]]; num_items],
            records,
            user_keys: (0..11).map(|u| format!("u{u}")).collect(),
            item_keys: (0..num_items).map(|i| format!("i{i}")).collect(),
        }
    }

    fn spec() -> SplitSpec {
        SplitSpec {
            n_old: 20,
            n_new: 9,
            k_fold: 3,
            coldstart_holdout: 6,
        }
    }

    #[test]
    fn boundary_semantics_are_strict() {
        // exactly n_old+1 samples → old; exactly n_old → new; exactly n_new → discarded
        let log = log_with_counts(&[(0, 21), (1, 20), (2, 9), (3, 30), (4, 10)]);
        let s = split(&log, &spec()).unwrap();
        assert_eq!(s.old_items, vec![0, 3]);
        assert_eq!(s.new_items, vec![1, 4]);
    }

    #[test]
    fn minimal_new_item_has_one_test_sample() {
        // 3·k_fold + 1 samples → folds of k, test of exactly 1
        let log = log_with_counts(&[(0, 25), (1, 10)]);
        let s = split(&log, &spec()).unwrap();
        assert_eq!(s.warm_a[&1].len(), 3);
        assert_eq!(s.warm_b[&1].len(), 3);
        assert_eq!(s.warm_c[&1].len(), 3);
        assert_eq!(s.test.iter().filter(|r| r.item == 1).count(), 1);
    }

    #[test]
    fn folds_are_timestamp_ordered_and_disjoint() {
        let log = log_with_counts(&[(0, 25), (1, 14)]);
        let s = split(&log, &spec()).unwrap();
        for item in &s.new_items {
            let a = &s.warm_a[item];
            let b = &s.warm_b[item];
            let c = &s.warm_c[item];
            let t: Vec<_> = s.test.iter().filter(|r| r.item == *item).collect();
            let last = |v: &[Record]| v.last().unwrap().ts;
            let first = |v: &[Record]| v.first().unwrap().ts;
            assert!(last(a) <= first(b));
            assert!(last(b) <= first(c));
            assert!(c.last().unwrap().ts <= t.first().unwrap().ts);
            let total = a.len() + b.len() + c.len() + t.len();
            assert_eq!(total, 14);
        }
    }

    #[test]
    fn old_items_split_into_pretrain_and_holdout() {
        let log = log_with_counts(&[(0, 30), (1, 12)]);
        let s = split(&log, &spec()).unwrap();
        assert_eq!(s.coldstart.len(), 6);
        assert_eq!(s.pretrain.len(), 24);
        // holdout is the most recent slice
        let max_pre = s.pretrain.iter().map(|r| r.ts).max().unwrap();
        let min_hold = s.coldstart.iter().map(|r| r.ts).min().unwrap();
        assert!(max_pre < min_hold);
    }

    #[test]
    fn degenerate_splits_error() {
        let log = log_with_counts(&[(0, 25)]);
        assert!(matches!(split(&log, &spec()), Err(DataError::NoNewItems(..))));
        let log = log_with_counts(&[(0, 12)]);
        assert!(matches!(split(&log, &spec()), Err(DataError::NoOldItems(..))));
    }

    #[test]
    fn split_is_deterministic() {
        let log = log_with_counts(&[(0, 30), (1, 12), (2, 25), (3, 11)]);
        let a = split(&log, &spec()).unwrap();
        let b = split(&log, &spec()).unwrap();
        assert_eq!(a.pretrain, b.pretrain);
        assert_eq!(a.test, b.test);
        assert_eq!(a.manifest(&spec()), b.manifest(&spec()));
    }

    #[test]
    fn spec_validation_rules() {
        assert!(SplitSpec { n_old: 10, n_new: 9, k_fold: 3, coldstart_holdout: 0 }.validate().is_ok());
        // n_new below 3·k_fold
        assert!(SplitSpec { n_old: 10, n_new: 8, k_fold: 3, coldstart_holdout: 0 }.validate().is_err());
        // n_old must exceed n_new
        assert!(SplitSpec { n_old: 9, n_new: 9, k_fold: 3, coldstart_holdout: 0 }.validate().is_err());
    }
}
