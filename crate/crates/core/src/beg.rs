//! Base embedding generator.
//!
//! Two items are similar when they share users, with each shared user
//! dampened by how many items that user touched: a user who saw everything
//! says little about any one pair. A new item's base embedding is the
//! weighted sum of its top-K most similar old items' ID embeddings.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::dataio::Record;
use crate::recmodel::EmbeddingTable;

#[derive(Debug, Error)]
pub enum BegError {
    #[error("item {0} is not in the co-occurrence index")]
    UnindexedItem(u32),
    #[error("neighbor row {index} outside table with {vocab} rows")]
    InvalidRow { index: u32, vocab: usize },
}

/// Bipartite incidence: users per item and items per user, with set
/// semantics (duplicate interactions count once).
#[derive(Debug, Clone, Default)]
pub struct CooccurrenceIndex {
    users_of_item: BTreeMap<u32, BTreeSet<u32>>,
    items_of_user: BTreeMap<u32, BTreeSet<u32>>,
    built_from: usize,
}

impl CooccurrenceIndex {
    pub fn users_of(&self, item: u32) -> Option<&BTreeSet<u32>> {
        self.users_of_item.get(&item)
    }

    pub fn items_of(&self, user: u32) -> Option<&BTreeSet<u32>> {
        self.items_of_user.get(&user)
    }

    pub fn item_count(&self) -> usize {
        self.users_of_item.len()
    }

    pub fn interactions_indexed(&self) -> usize {
        self.built_from
    }

    fn user_weight(&self, user: u32) -> f64 {
        let n = self.items_of_user[&user].len() as f64;
        1.0 / (1.0 + n).ln()
    }
}

/// Builds the incidence index. With `positive_only`, records labeled 0 are
/// ignored; this is the default reading of "interacted with" for item
/// similarity.
pub fn build_index(interactions: &[Record], positive_only: bool) -> CooccurrenceIndex {
    let mut idx = CooccurrenceIndex::default();
    for r in interactions {
        if positive_only && r.label == 0 {
            continue;
        }
        idx.users_of_item.entry(r.item).or_default().insert(r.user);
        idx.items_of_user.entry(r.user).or_default().insert(r.item);
        idx.built_from += 1;
    }
    idx
}

/// Dampened co-occurrence similarity of two indexed items: the sum of
/// 1/ln(1+|I(a)|) over shared users a, normalized by √(|U(i)|·|U(j)|).
/// Natural log; ranking and weights are invariant to the base.
pub fn similarity(index: &CooccurrenceIndex, i: u32, j: u32) -> Result<f64, BegError> {
    debug_assert_ne!(i, j, "similarity is defined for distinct items");
    let ui = index.users_of(i).ok_or(BegError::UnindexedItem(i))?;
    let uj = index.users_of(j).ok_or(BegError::UnindexedItem(j))?;
    let mut acc = 0.0;
    for a in ui.intersection(uj) {
        acc += index.user_weight(*a);
    }
    Ok(acc / ((ui.len() * uj.len()) as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborEntry {
    pub item: u32,
    pub sim: f64,
    pub alpha: f64,
}

/// Up to K similar old items with normalized weights, similarity
/// descending, ties broken by ascending item id. The item itself never
/// appears.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborList {
    pub item: u32,
    pub entries: Vec<NeighborEntry>,
}

impl NeighborList {
    /// Sorts, truncates to K and normalizes the weights. Entries with
    /// non-positive similarity are dropped.
    pub fn from_scored(item: u32, scored: Vec<(u32, f64)>, k: usize) -> Self {
        let mut kept: Vec<(u32, f64)> = scored
            .into_iter()
            .filter(|&(cand, sim)| cand != item && sim > 0.0)
            .collect();
        kept.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        kept.truncate(k);
        let total: f64 = kept.iter().map(|&(_, s)| s).sum();
        let entries = kept
            .into_iter()
            .map(|(cand, sim)| NeighborEntry {
                item: cand,
                sim,
                alpha: sim / total,
            })
            .collect();
        Self { item, entries }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Top-K similar old items for `item`. Only candidates sharing at least one
/// user can score above zero, so the scan accumulates over the item's users
/// (one pass of the similarity numerator) instead of trying all pairs.
pub fn top_k_neighbors(
    index: &CooccurrenceIndex,
    item: u32,
    old_items: &BTreeSet<u32>,
    k: usize,
) -> Result<NeighborList, BegError> {
    debug_assert!(k >= 1);
    let ui = index.users_of(item).ok_or(BegError::UnindexedItem(item))?;
    let mut numer: BTreeMap<u32, f64> = BTreeMap::new();
    for a in ui {
        let w = index.user_weight(*a);
        for j in &index.items_of_user[a] {
            if *j != item && old_items.contains(j) {
                *numer.entry(*j).or_insert(0.0) += w;
            }
        }
    }
    let scored: Vec<(u32, f64)> = numer
        .into_iter()
        .map(|(j, num)| {
            let uj = index.users_of_item[&j].len();
            (j, num / ((ui.len() * uj) as f64).sqrt())
        })
        .collect();
    Ok(NeighborList::from_scored(item, scored, k))
}

/// Weighted sum of the neighbors' ID embedding rows. `None` for an empty
/// neighbor list — the caller substitutes the global-average fallback.
pub fn base_embedding(neighbors: &NeighborList, item_table: &EmbeddingTable) -> Result<Option<Vec<f64>>, BegError> {
    if neighbors.is_empty() {
        return Ok(None);
    }
    let d = item_table.dim();
    let mut out = vec![0.0; d];
    for e in &neighbors.entries {
        if e.item as usize >= item_table.vocab() {
            return Err(BegError::InvalidRow {
                index: e.item,
                vocab: item_table.vocab(),
            });
        }
        for (o, &v) in out.iter_mut().zip(item_table.row(e.item)) {
            *o += e.alpha * v;
        }
    }
    Ok(Some(out))
}

/// Debug dump: one `item<TAB>neighbor:sim:alpha,...` line per list.
pub fn dump_neighbors(lists: &[NeighborList]) -> String {
    let mut out = String::new();
    for l in lists {
        out.push_str(&l.item.to_string());
        out.push('\t');
        let cells: Vec<String> = l
            .entries
            .iter()
            .map(|e| format!("{}:{:.12}:{:.12}", e.item, e.sim, e.alpha))
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn rec(user: u32, item: u32) -> Record {
        Record { user, item, label: 1, ts: 0 }
    }

    #[test]
    fn single_interaction_populates_both_sides() {
        let idx = build_index(&[rec(7, 3)], true);
        assert_eq!(idx.users_of(3).unwrap().len(), 1);
        assert!(idx.users_of(3).unwrap().contains(&7));
        assert!(idx.items_of(7).unwrap().contains(&3));
    }

    #[test]
    fn duplicates_count_once() {
        let idx = build_index(&[rec(7, 3), rec(7, 3)], true);
        assert_eq!(idx.users_of(3).unwrap().len(), 1);
    }

    #[test]
    fn full_bipartite_has_full_degree() {
        let mut recs = Vec::new();
        for u in 0..3 {
            for i in 0..3 {
                recs.push(rec(u, i));
            }
        }
        let idx = build_index(&recs, true);
        for i in 0..3 {
            assert_eq!(idx.users_of(i).unwrap().len(), 3);
        }
        for u in 0..3 {
            assert_eq!(idx.items_of(u).unwrap().len(), 3);
        }
    }

    #[test]
    fn positive_only_drops_negative_labels() {
        let mut neg = rec(1, 2);
        neg.label = 0;
        let idx = build_index(&[neg, rec(3, 2)], true);
        assert_eq!(idx.users_of(2).unwrap().len(), 1);
        let idx_all = build_index(&[neg, rec(3, 2)], false);
        assert_eq!(idx_all.users_of(2).unwrap().len(), 2);
    }

    #[test]
    fn disjoint_user_sets_score_zero() {
        let idx = build_index(&[rec(0, 1), rec(1, 2)], true);
        assert_eq!(similarity(&idx, 1, 2).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_similarity() {
        // user a sees items i and j, user b sees only i:
        // |I(a)|=2, |U(i)|=2, |U(j)|=1 → (1/ln 3)/√2
        let idx = build_index(&[rec(0, 10), rec(0, 11), rec(1, 10)], true);
        let got = similarity(&idx, 10, 11).unwrap();
        let expect = (1.0 / 3.0f64.ln()) / 2.0f64.sqrt();
        assert!((got - expect).abs() < 1e-15);
        assert!((got - 0.6436).abs() < 1e-4);
    }

    #[test]
    fn unindexed_item_errors() {
        let idx = build_index(&[rec(0, 1), rec(0, 2)], true);
        assert!(matches!(similarity(&idx, 1, 99), Err(BegError::UnindexedItem(99))));
        assert!(matches!(
            top_k_neighbors(&idx, 99, &BTreeSet::from([1]), 3),
            Err(BegError::UnindexedItem(99))
        ));
    }

    fn random_bipartite(rng: &mut ChaCha12Rng, users: u32, items: u32, density: f64) -> Vec<Record> {
        let mut recs = Vec::new();
        for u in 0..users {
            for i in 0..items {
                if rng.random_range(0.0..1.0) < density {
                    recs.push(rec(u, i));
                }
            }
        }
        recs
    }

    /// Brute-force restatement of the similarity formula straight from the
    /// raw interactions, kept independent from the index internals.
    fn brute_force_similarity(recs: &[Record], i: u32, j: u32) -> f64 {
        use std::collections::HashSet;
        let users = |it: u32| -> HashSet<u32> {
            recs.iter().filter(|r| r.item == it).map(|r| r.user).collect()
        };
        let items = |u: u32| -> HashSet<u32> {
            recs.iter().filter(|r| r.user == u).map(|r| r.item).collect()
        };
        let ui = users(i);
        let uj = users(j);
        if ui.is_empty() || uj.is_empty() {
            return f64::NAN;
        }
        let mut shared: Vec<u32> = ui.intersection(&uj).copied().collect();
        shared.sort_unstable();
        let num: f64 = shared.iter().map(|&a| 1.0 / (1.0 + items(a).len() as f64).ln()).sum();
        num / ((ui.len() * uj.len()) as f64).sqrt()
    }

    #[test]
    fn similarity_matches_brute_force_oracle() {
        for seed in 0..30u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let users = rng.random_range(2..=20);
            let items = rng.random_range(2..=20);
            let recs = random_bipartite(&mut rng, users, items, 0.25);
            let idx = build_index(&recs, true);
            let indexed: Vec<u32> = idx.users_of_item.keys().copied().collect();
            for (a, &i) in indexed.iter().enumerate() {
                for &j in &indexed[a + 1..] {
                    let fast = similarity(&idx, i, j).unwrap();
                    let slow = brute_force_similarity(&recs, i, j);
                    assert!((fast - slow).abs() < 1e-12, "seed {seed}: {fast} vs {slow}");
                    let sym = similarity(&idx, j, i).unwrap();
                    assert!((fast - sym).abs() < 1e-15, "symmetry violated");
                }
            }
        }
    }

    #[test]
    fn top_k_accumulation_matches_pairwise_similarity() {
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let recs = random_bipartite(&mut rng, 15, 12, 0.3);
        let idx = build_index(&recs, true);
        let all: BTreeSet<u32> = idx.users_of_item.keys().copied().collect();
        for &i in &all {
            let list = top_k_neighbors(&idx, i, &all, usize::MAX).unwrap();
            for e in &list.entries {
                let direct = similarity(&idx, i, e.item).unwrap();
                assert!((e.sim - direct).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_neighbor_takes_all_weight() {
        let list = NeighborList::from_scored(5, vec![(1, 0.37)], 4);
        assert_eq!(list.entries.len(), 1);
        assert_eq!(list.entries[0].alpha, 1.0);
    }

    #[test]
    fn weights_are_proportional_to_similarity() {
        let list = NeighborList::from_scored(5, vec![(1, 0.6), (2, 0.2)], 4);
        assert!((list.entries[0].alpha - 0.75).abs() < 1e-15);
        assert!((list.entries[1].alpha - 0.25).abs() < 1e-15);
    }

    #[test]
    fn k_larger_than_candidates_keeps_all() {
        let list = NeighborList::from_scored(5, vec![(1, 0.6), (2, 0.2)], 10);
        assert_eq!(list.entries.len(), 2);
    }

    #[test]
    fn self_and_nonpositive_scores_are_dropped() {
        let list = NeighborList::from_scored(5, vec![(5, 0.9), (1, 0.0), (2, 0.4)], 10);
        assert_eq!(list.entries.len(), 1);
        assert_eq!(list.entries[0].item, 2);
    }

    #[test]
    fn ties_break_by_ascending_item_id() {
        let list = NeighborList::from_scored(9, vec![(4, 0.5), (2, 0.5), (3, 0.7)], 10);
        let order: Vec<u32> = list.entries.iter().map(|e| e.item).collect();
        assert_eq!(order, vec![3, 2, 4]);
    }

    #[test]
    fn base_embedding_mixes_rows() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut table = EmbeddingTable::random(3, 2, &mut rng);
        table.set_row(1, &[1.0, 0.0]);
        table.set_row(2, &[0.0, 1.0]);
        let list = NeighborList {
            item: 0,
            entries: vec![
                NeighborEntry { item: 1, sim: 1.0, alpha: 0.25 },
                NeighborEntry { item: 2, sim: 3.0, alpha: 0.75 },
            ],
        };
        let v = base_embedding(&list, &table).unwrap().unwrap();
        assert_eq!(v, vec![0.25, 0.75]);
    }

    #[test]
    fn base_embedding_single_neighbor_is_that_row() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let table = EmbeddingTable::random(3, 4, &mut rng);
        let list = NeighborList {
            item: 0,
            entries: vec![NeighborEntry { item: 2, sim: 1.0, alpha: 1.0 }],
        };
        let v = base_embedding(&list, &table).unwrap().unwrap();
        assert_eq!(v, table.row(2));
    }

    #[test]
    fn base_embedding_of_identical_rows_is_that_vector() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut table = EmbeddingTable::random(3, 2, &mut rng);
        table.set_row(0, &[0.3, -0.4]);
        table.set_row(1, &[0.3, -0.4]);
        let list = NeighborList {
            item: 9,
            entries: vec![
                NeighborEntry { item: 0, sim: 2.0, alpha: 0.6 },
                NeighborEntry { item: 1, sim: 1.0, alpha: 0.4 },
            ],
        };
        let v = base_embedding(&list, &table).unwrap().unwrap();
        assert!((v[0] - 0.3).abs() < 1e-15);
        assert!((v[1] - -0.4).abs() < 1e-15);
    }

    #[test]
    fn empty_neighbors_yield_fallback_sentinel() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let table = EmbeddingTable::random(3, 2, &mut rng);
        let list = NeighborList { item: 0, entries: vec![] };
        assert!(base_embedding(&list, &table).unwrap().is_none());
    }

    #[test]
    fn invalid_neighbor_row_errors() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let table = EmbeddingTable::random(3, 2, &mut rng);
        let list = NeighborList {
            item: 0,
            entries: vec![NeighborEntry { item: 9, sim: 1.0, alpha: 1.0 }],
        };
        assert!(matches!(
            base_embedding(&list, &table),
            Err(BegError::InvalidRow { index: 9, .. })
        ));
    }

    #[test]
    fn log_base_change_preserves_neighbors_and_weights() {
        // Sim scales by 1/ln(b) for any base b, so membership, order and α
        // are identical.
        for seed in [11u64, 12, 13] {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let recs = random_bipartite(&mut rng, 12, 10, 0.35);
            let idx = build_index(&recs, true);
            let all: BTreeSet<u32> = idx.users_of_item.keys().copied().collect();
            for &i in &all {
                let natural = top_k_neighbors(&idx, i, &all, 4).unwrap();
                // same scores recomputed with log base 2
                let scored_b2: Vec<(u32, f64)> = all
                    .iter()
                    .filter(|&&j| j != i)
                    .map(|&j| {
                        let ui = idx.users_of(i).unwrap();
                        let uj = idx.users_of(j).unwrap();
                        let num: f64 = ui
                            .intersection(uj)
                            .map(|a| 1.0 / (1.0 + idx.items_of(*a).unwrap().len() as f64).log2())
                            .sum();
                        (j, num / ((ui.len() * uj.len()) as f64).sqrt())
                    })
                    .collect();
                let base2 = NeighborList::from_scored(i, scored_b2, 4);
                let ids = |l: &NeighborList| l.entries.iter().map(|e| e.item).collect::<Vec<_>>();
                assert_eq!(ids(&natural), ids(&base2));
                for (a, b) in natural.entries.iter().zip(&base2.entries) {
                    assert!((a.alpha - b.alpha).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn dampening_shrinks_busy_user_contributions() {
        // identical pair structure, but the shared user gets busier
        let small = build_index(&[rec(0, 1), rec(0, 2)], true);
        let big = build_index(&[rec(0, 1), rec(0, 2), rec(0, 3), rec(0, 4)], true);
        let s_small = similarity(&small, 1, 2).unwrap();
        let s_big = similarity(&big, 1, 2).unwrap();
        assert!(s_big < s_small);
    }

    #[test]
    fn neighbor_dump_format() {
        let lists = vec![NeighborList {
            item: 3,
            entries: vec![NeighborEntry { item: 1, sim: 0.5, alpha: 1.0 }],
        }];
        let dump = dump_neighbors(&lists);
        assert_eq!(dump, "3\t1:0.500000000000:1.000000000000\n");
    }

    proptest! {
        #[test]
        fn weight_simplex(seed in 0u64..500) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let recs = random_bipartite(&mut rng, 10, 8, 0.3);
            if recs.is_empty() {
                return Ok(());
            }
            let idx = build_index(&recs, true);
            let all: std::collections::BTreeSet<u32> = recs.iter().map(|r| r.item).collect();
            for &i in &all {
                let list = top_k_neighbors(&idx, i, &all, 3).unwrap();
                prop_assert!(list.entries.iter().all(|e| e.item != i));
                if !list.is_empty() {
                    prop_assert!(list.entries.iter().all(|e| e.alpha >= 0.0));
                    let total: f64 = list.entries.iter().map(|e| e.alpha).sum();
                    prop_assert!((total - 1.0).abs() < 1e-9);
                    for w in list.entries.windows(2) {
                        prop_assert!(w[0].sim >= w[1].sim);
                    }
                }
            }
        }
    }
}
