//! Composition layer: turns the base and shift generators into initial ID
//! embeddings for new items, with global-average fallbacks when an item has
//! no usable interactions, warm-phase regeneration, ablation variants and
//! the simple baseline initializers.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beg::{base_embedding, build_index, top_k_neighbors, BegError, CooccurrenceIndex};
use crate::dataio::{InteractionLog, Record};
use crate::recmodel::{ModelParams, RecError};
use crate::seg::{item_attr_embeddings, mean_user_embedding, shift_embedding, SegError, SegParams};

#[derive(Debug, Error)]
pub enum CometaError {
    #[error("initializer '{0}' needs a trained shift generator")]
    MissingGenerator(InitializerKind),
    #[error(transparent)]
    Beg(#[from] BegError),
    #[error(transparent)]
    Seg(#[from] SegError),
    #[error(transparent)]
    Rec(#[from] RecError),
}

/// How a new item's ID embedding row gets initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitializerKind {
    /// fresh row from the init distribution (the plain backbone)
    Random,
    /// mean old-item ID embedding for every new item
    GlobalAverage,
    /// generator output with the pooled-user input pinned to the global
    /// user average — an attribute-feature-only baseline
    AttributeOnly,
    /// base + shift
    Cometa,
    /// shift only
    CometaNoBeg,
    /// base only
    CometaNoSeg,
}

impl InitializerKind {
    pub const ALL: [InitializerKind; 6] = [
        InitializerKind::Random,
        InitializerKind::GlobalAverage,
        InitializerKind::AttributeOnly,
        InitializerKind::Cometa,
        InitializerKind::CometaNoBeg,
        InitializerKind::CometaNoSeg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InitializerKind::Random => "random",
            InitializerKind::GlobalAverage => "global_average",
            InitializerKind::AttributeOnly => "attribute_only",
            InitializerKind::Cometa => "cometa",
            InitializerKind::CometaNoBeg => "cometa_no_beg",
            InitializerKind::CometaNoSeg => "cometa_no_seg",
        }
    }

    /// Kinds that regenerate their meta embeddings once warm interactions
    /// exist. The baselines keep their cold-phase rows.
    pub fn regenerates_warm(self) -> bool {
        matches!(
            self,
            InitializerKind::Cometa | InitializerKind::CometaNoBeg | InitializerKind::CometaNoSeg
        )
    }

    /// Whether the kind needs a trained shift generator, and which training
    /// mode it expects.
    pub fn generator_slot(self) -> Option<GeneratorSlot> {
        match self {
            InitializerKind::Cometa => Some(GeneratorSlot::Full),
            InitializerKind::CometaNoBeg => Some(GeneratorSlot::NoBase),
            InitializerKind::AttributeOnly => Some(GeneratorSlot::AttrOnly),
            _ => None,
        }
    }
}

impl fmt::Display for InitializerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InitializerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        InitializerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown initializer '{s}'"))
    }
}

/// The three shift-generator training modes that can back initializers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorSlot {
    /// episodes add the neighbor base under the shift
    Full,
    /// episodes train the shift to stand alone
    NoBase,
    /// stand-alone shift with the pooled-user input pinned
    AttrOnly,
}

/// Trained generators by slot. Kinds that need a missing slot error out.
#[derive(Debug, Clone, Default)]
pub struct SegVariants {
    pub full: Option<SegParams>,
    pub no_base: Option<SegParams>,
    pub attr_only: Option<SegParams>,
}

impl SegVariants {
    pub fn get(&self, slot: GeneratorSlot) -> Option<&SegParams> {
        match slot {
            GeneratorSlot::Full => self.full.as_ref(),
            GeneratorSlot::NoBase => self.no_base.as_ref(),
            GeneratorSlot::AttrOnly => self.attr_only.as_ref(),
        }
    }

    pub fn set(&mut self, slot: GeneratorSlot, params: SegParams) {
        match slot {
            GeneratorSlot::Full => self.full = Some(params),
            GeneratorSlot::NoBase => self.no_base = Some(params),
            GeneratorSlot::AttrOnly => self.attr_only = Some(params),
        }
    }

    fn for_kind(&self, kind: InitializerKind) -> Result<Option<&SegParams>, CometaError> {
        match kind.generator_slot() {
            None => Ok(None),
            Some(slot) => self
                .get(slot)
                .map(Some)
                .ok_or(CometaError::MissingGenerator(kind)),
        }
    }
}

/// Mean old-item ID embedding and mean user ID embedding — the cold-phase
/// stand-ins when an item has no interactions yet.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalAverages {
    pub item_mean: Vec<f64>,
    pub user_mean: Vec<f64>,
}

impl GlobalAverages {
    pub fn compute(model: &ModelParams, old_items: &BTreeSet<u32>) -> Self {
        let d = model.schema.embed_dim;
        let mut item_mean = vec![0.0; d];
        for &i in old_items {
            for (o, &v) in item_mean.iter_mut().zip(model.item_table.row(i)) {
                *o += v;
            }
        }
        if !old_items.is_empty() {
            item_mean.iter_mut().for_each(|v| *v /= old_items.len() as f64);
        }
        let mut user_mean = vec![0.0; d];
        let users = model.user_table.vocab();
        for u in 0..users as u32 {
            for (o, &v) in user_mean.iter_mut().zip(model.user_table.row(u)) {
                *o += v;
            }
        }
        if users > 0 {
            user_mean.iter_mut().for_each(|v| *v /= users as f64);
        }
        Self { item_mean, user_mean }
    }
}

/// Frozen surroundings shared by every embedding generation call.
pub struct Generators<'a> {
    pub model: &'a ModelParams,
    pub log: &'a InteractionLog,
    pub old_items: &'a BTreeSet<u32>,
    pub globals: &'a GlobalAverages,
    pub k_neighbors: usize,
}

impl Generators<'_> {
    /// The initial ID embedding for `item` under the chosen kind.
    ///
    /// `phase` is what the item has observed so far (empty in the cold
    /// phase) and `index` must cover those interactions when present.
    /// Components that lack data fall back to the global averages: the base
    /// embedding to the mean old-item row, the pooled-user input to the
    /// mean user row.
    pub fn meta_embedding(
        &self,
        item: u32,
        phase: &[Record],
        index: Option<&CooccurrenceIndex>,
        seg: &SegVariants,
        kind: InitializerKind,
        rng: &mut ChaCha12Rng,
    ) -> Result<Vec<f64>, CometaError> {
        let d = self.model.schema.embed_dim;
        let seg_params = seg.for_kind(kind)?;

        let base = |this: &Self| -> Result<Vec<f64>, CometaError> {
            if phase.is_empty() {
                return Ok(this.globals.item_mean.clone());
            }
            let Some(ix) = index else {
                return Ok(this.globals.item_mean.clone());
            };
            match top_k_neighbors(ix, item, this.old_items, this.k_neighbors) {
                Ok(list) => Ok(base_embedding(&list, &this.model.item_table)?
                    .unwrap_or_else(|| this.globals.item_mean.clone())),
                // an item with no positive interactions is not indexed
                Err(BegError::UnindexedItem(_)) => Ok(this.globals.item_mean.clone()),
                Err(e) => Err(e.into()),
            }
        };

        let pooled_user = |this: &Self| -> Vec<f64> {
            let users: BTreeSet<u32> = phase.iter().map(|r| r.user).collect();
            match mean_user_embedding(&users, &this.model.user_table) {
                Ok(v) => v,
                Err(_) => this.globals.user_mean.clone(),
            }
        };

        let shift = |this: &Self, params: &SegParams, h_u_input: &[f64]| -> Result<Vec<f64>, CometaError> {
            let attrs = item_attr_embeddings(this.model, this.log, item);
            Ok(shift_embedding(params, h_u_input, &attrs)?)
        };

        Ok(match kind {
            InitializerKind::Random => (0..d).map(|_| rng.random_range(-0.01..0.01)).collect(),
            InitializerKind::GlobalAverage => self.globals.item_mean.clone(),
            InitializerKind::AttributeOnly => {
                // pooled-user input pinned to the global average in every phase
                shift(self, seg_params.unwrap(), &self.globals.user_mean)?
            }
            InitializerKind::CometaNoSeg => base(self)?,
            InitializerKind::CometaNoBeg => {
                let h_u = pooled_user(self);
                shift(self, seg_params.unwrap(), &h_u)?
            }
            InitializerKind::Cometa => {
                let v_beg = base(self)?;
                let h_u = pooled_user(self);
                let v_seg = shift(self, seg_params.unwrap(), &h_u)?;
                v_beg.iter().zip(&v_seg).map(|(a, b)| a + b).collect()
            }
        })
    }

    /// Cold-phase initialization: overwrite each new item's row with its
    /// kind's embedding computed from no interactions. Old rows and all
    /// non-embedding parameters are untouched.
    pub fn initialize_cold(
        &self,
        target: &mut ModelParams,
        new_items: &[u32],
        seg: &SegVariants,
        kind: InitializerKind,
        seed: u64,
    ) -> Result<(), CometaError> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for &item in new_items {
            let row = self.meta_embedding(item, &[], None, seg, kind, &mut rng)?;
            target.item_table.set_row(item, &row);
        }
        Ok(())
    }

    /// Warm-phase regeneration: rebuild the co-occurrence index so warm
    /// interactions link new items to users (old items stay the only
    /// neighbor candidates), then replace each new item's row with a fresh
    /// embedding from its warm interactions. Items without warm data keep
    /// their cold-phase row.
    pub fn regenerate_warm(
        &self,
        target: &mut ModelParams,
        base_interactions: &[Record],
        warm: &std::collections::BTreeMap<u32, Vec<Record>>,
        seg: &SegVariants,
        kind: InitializerKind,
        seed: u64,
    ) -> Result<(), CometaError> {
        let mut combined: Vec<Record> = base_interactions.to_vec();
        for recs in warm.values() {
            combined.extend_from_slice(recs);
        }
        let index = build_index(&combined, true);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for (&item, phase) in warm {
            if phase.is_empty() {
                continue;
            }
            let row = self.meta_embedding(item, phase, Some(&index), seg, kind, &mut rng)?;
            target.item_table.set_row(item, &row);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synthesize, FieldDef, SynthConfig};
    use crate::recmodel::FeatureSchema;

    fn fixture() -> (InteractionLog, ModelParams, BTreeSet<u32>) {
        let cfg = SynthConfig {
            users: 30,
            old_items: 6,
            new_items: 3,
            latent_dim: 3,
            old_count_min: 15,
            old_count_max: 20,
            new_count_min: 5,
            new_count_max: 8,
            user_attr_fields: 1,
            item_attr_fields: 2,
            attr_buckets: 4,
            noise: 0.1,
            ..SynthConfig::default()
        };
        let log = synthesize(&cfg, 7).unwrap();
        let model = ModelParams::init(FeatureSchema::from_log(&log, 4), &[8, 8], 7);
        let old: BTreeSet<u32> = (0..6).collect();
        (log, model, old)
    }

    fn gens<'a>(
        log: &'a InteractionLog,
        model: &'a ModelParams,
        old: &'a BTreeSet<u32>,
        globals: &'a GlobalAverages,
    ) -> Generators<'a> {
        Generators {
            model,
            log,
            old_items: old,
            globals,
            k_neighbors: 3,
        }
    }

    fn variants(d: usize, m: usize) -> SegVariants {
        let mut v = SegVariants::default();
        v.set(GeneratorSlot::Full, SegParams::init(d, m, &[6], 1));
        v.set(GeneratorSlot::NoBase, SegParams::init(d, m, &[6], 2));
        v.set(GeneratorSlot::AttrOnly, SegParams::init(d, m, &[6], 3));
        v
    }

    #[test]
    fn global_averages_are_true_means() {
        let (log, model, old) = fixture();
        let _ = log;
        let g = GlobalAverages::compute(&model, &old);
        let d = 4;
        let mut expect = vec![0.0; d];
        for &i in &old {
            for (e, &v) in expect.iter_mut().zip(model.item_table.row(i)) {
                *e += v;
            }
        }
        expect.iter_mut().for_each(|v| *v /= old.len() as f64);
        for (a, b) in g.item_mean.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cold_phase_uses_global_averages_inside_both_generators() {
        let (log, model, old) = fixture();
        let globals = GlobalAverages::compute(&model, &old);
        let g = gens(&log, &model, &old, &globals);
        let seg = variants(4, 2);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let got = g
            .meta_embedding(7, &[], None, &seg, InitializerKind::Cometa, &mut rng)
            .unwrap();
        let attrs = item_attr_embeddings(&model, &log, 7);
        let v_seg = shift_embedding(seg.full.as_ref().unwrap(), &globals.user_mean, &attrs).unwrap();
        let expect: Vec<f64> = globals.item_mean.iter().zip(&v_seg).map(|(a, b)| a + b).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn decomposition_recovers_the_shift_exactly() {
        let (log, model, old) = fixture();
        let globals = GlobalAverages::compute(&model, &old);
        let g = gens(&log, &model, &old, &globals);
        let mut seg = variants(4, 2);
        // no_seg ignores the generator; use the same full generator for both sides
        seg.no_base = seg.full.clone();
        let item = 6u32;
        let phase: Vec<Record> = log.records.iter().filter(|r| r.item == item).copied().collect();
        let index = build_index(&log.records, true);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let full = g
            .meta_embedding(item, &phase, Some(&index), &seg, InitializerKind::Cometa, &mut rng)
            .unwrap();
        let base_only = g
            .meta_embedding(item, &phase, Some(&index), &seg, InitializerKind::CometaNoSeg, &mut rng)
            .unwrap();
        let users: BTreeSet<u32> = phase.iter().map(|r| r.user).collect();
        let h_u = mean_user_embedding(&users, &model.user_table).unwrap();
        let attrs = item_attr_embeddings(&model, &log, item);
        let v_seg = shift_embedding(seg.full.as_ref().unwrap(), &h_u, &attrs).unwrap();
        for i in 0..4 {
            assert!((full[i] - base_only[i] - v_seg[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_generator_collapses_to_the_base_variant() {
        let (log, model, old) = fixture();
        let globals = GlobalAverages::compute(&model, &old);
        let g = gens(&log, &model, &old, &globals);
        let mut seg = variants(4, 2);
        for t in seg.full.as_mut().unwrap().tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let item = 8u32;
        let phase: Vec<Record> = log.records.iter().filter(|r| r.item == item).copied().collect();
        let index = build_index(&log.records, true);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let full = g
            .meta_embedding(item, &phase, Some(&index), &seg, InitializerKind::Cometa, &mut rng)
            .unwrap();
        let base_only = g
            .meta_embedding(item, &phase, Some(&index), &seg, InitializerKind::CometaNoSeg, &mut rng)
            .unwrap();
        assert_eq!(full, base_only);
    }

    #[test]
    fn global_average_is_item_independent() {
        let (log, model, old) = fixture();
        let globals = GlobalAverages::compute(&model, &old);
        let g = gens(&log, &model, &old, &globals);
        let seg = SegVariants::default();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let a = g
            .meta_embedding(6, &[], None, &seg, InitializerKind::GlobalAverage, &mut rng)
            .unwrap();
        let b = g
            .meta_embedding(8, &[], None, &seg, InitializerKind::GlobalAverage, &mut rng)
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a, globals.item_mean);
    }

    #[test]
    fn attribute_only_ignores_phase_interactions_for_pooling() {
        let (log, model, old) = fixture();
        let globals = GlobalAverages::compute(&model, &old);
        let g = gens(&log, &model, &old, &globals);
        let seg = variants(4, 2);
        let item = 7u32;
        let phase: Vec<Record> = log.records.iter().filter(|r| r.item == item).copied().collect();
        assert!(!phase.is_empty());
        let index = build_index(&log.records, true);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let warm = g
            .meta_embedding(item, &phase, Some(&index), &seg, InitializerKind::AttributeOnly, &mut rng)
            .unwrap();
        let cold = g
            .meta_embedding(item, &[], None, &seg, InitializerKind::AttributeOnly, &mut rng)
            .unwrap();
        assert_eq!(warm, cold);
    }

    #[test]
    fn missing_generator_is_an_error() {
        let (log, model, old) = fixture();
        let globals = GlobalAverages::compute(&model, &old);
        let g = gens(&log, &model, &old, &globals);
        let seg = SegVariants::default();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let err = g
            .meta_embedding(6, &[], None, &seg, InitializerKind::Cometa, &mut rng)
            .unwrap_err();
        assert!(matches!(err, CometaError::MissingGenerator(InitializerKind::Cometa)));
    }

    #[test]
    fn cold_init_touches_only_new_item_rows() {
        let (log, model, old) = fixture();
        let globals = GlobalAverages::compute(&model, &old);
        let g = gens(&log, &model, &old, &globals);
        let seg = variants(4, 2);
        let new_items = [6u32, 7, 8];
        for kind in InitializerKind::ALL {
            let mut target = model.clone();
            g.initialize_cold(&mut target, &new_items, &seg, kind, 9).unwrap();
            assert_eq!(target.backbone_hash(), model.backbone_hash(), "{kind}");
            for &i in &old {
                assert_eq!(target.item_table.row(i), model.item_table.row(i), "{kind}");
            }
        }
    }

    #[test]
    fn random_init_is_seeded_and_per_item() {
        let (log, model, old) = fixture();
        let globals = GlobalAverages::compute(&model, &old);
        let g = gens(&log, &model, &old, &globals);
        let seg = SegVariants::default();
        let mut a = model.clone();
        let mut b = model.clone();
        g.initialize_cold(&mut a, &[6, 7, 8], &seg, InitializerKind::Random, 4).unwrap();
        g.initialize_cold(&mut b, &[6, 7, 8], &seg, InitializerKind::Random, 4).unwrap();
        assert_eq!(a.item_table.weights, b.item_table.weights);
        assert_ne!(a.item_table.row(6), a.item_table.row(7));
        assert!(a.item_table.row(6).iter().all(|v| v.abs() < 0.01));
    }

    /// A fixture where one new item's warm users exactly replicate one old
    /// item's user set, making that old item the single neighbor.
    fn handcrafted() -> (InteractionLog, ModelParams) {
        let num_users = 6;
        let mut records = Vec::new();
        // old item 0: users 0,1,2 (positive)
        for u in 0..3 {
            records.push(Record { user: u, item: 0, label: 1, ts: u as i64 });
        }
        // old item 1: users 3,4,5 (positive)
        for u in 3..6 {
            records.push(Record { user: u, item: 1, label: 1, ts: u as i64 });
        }
        let log = InteractionLog {
            num_users,
            num_items: 3,
            user_fields: vec![FieldDef { name: "uf".into(), vocab: 2 }],
            item_fields: vec![FieldDef { name: "if".into(), vocab: 2 }],
            user_attrs: vec![vec![vec![0]]; num_users],
            item_attrs: vec![vec![vec![0]], vec![vec![1]], vec![vec![0]]],
            records,
            user_keys: (0..num_users).map(|u| format!("u{u}")).collect(),
            item_keys: (0..3).map(|i| format!("i{i}")).collect(),
        };
        let model = ModelParams::init(FeatureSchema::from_log(&log, 4), &[8], 5);
        (log, model)
    }

    #[test]
    fn warm_item_matching_one_old_item_copies_its_row() {
        let (log, model) = handcrafted();
        let old: BTreeSet<u32> = BTreeSet::from([0, 1]);
        let globals = GlobalAverages::compute(&model, &old);
        let g = gens(&log, &model, &old, &globals);
        let seg = SegVariants::default();
        // new item 2 observed by exactly old item 0's users
        let warm: std::collections::BTreeMap<u32, Vec<Record>> = [(
            2u32,
            (0..3).map(|u| Record { user: u, item: 2, label: 1, ts: 100 + u as i64 }).collect(),
        )]
        .into();
        let mut target = model.clone();
        g.regenerate_warm(&mut target, &log.records, &warm, &seg, InitializerKind::CometaNoSeg, 1)
            .unwrap();
        assert_eq!(target.item_table.row(2), model.item_table.row(0));
        // old rows untouched
        assert_eq!(target.item_table.row(0), model.item_table.row(0));
        assert_eq!(target.item_table.row(1), model.item_table.row(1));
    }

    #[test]
    fn items_without_warm_data_keep_the_cold_row() {
        let (log, model) = handcrafted();
        let old: BTreeSet<u32> = BTreeSet::from([0, 1]);
        let globals = GlobalAverages::compute(&model, &old);
        let g = gens(&log, &model, &old, &globals);
        let seg = SegVariants::default();
        let mut target = model.clone();
        g.initialize_cold(&mut target, &[2], &seg, InitializerKind::CometaNoSeg, 1).unwrap();
        let cold_row = target.item_table.row(2).to_vec();
        let warm: std::collections::BTreeMap<u32, Vec<Record>> = [(2u32, Vec::new())].into();
        g.regenerate_warm(&mut target, &log.records, &warm, &seg, InitializerKind::CometaNoSeg, 1)
            .unwrap();
        assert_eq!(target.item_table.row(2), &cold_row[..]);
    }

    #[test]
    fn regeneration_is_idempotent() {
        let (log, model, old) = fixture();
        let globals = GlobalAverages::compute(&model, &old);
        let g = gens(&log, &model, &old, &globals);
        let seg = variants(4, 2);
        let warm: std::collections::BTreeMap<u32, Vec<Record>> = (6u32..9)
            .map(|i| {
                (
                    i,
                    log.records.iter().filter(|r| r.item == i).take(4).copied().collect::<Vec<_>>(),
                )
            })
            .collect();
        let base: Vec<Record> = log.records.iter().filter(|r| r.item < 6).copied().collect();
        let mut once = model.clone();
        g.regenerate_warm(&mut once, &base, &warm, &seg, InitializerKind::Cometa, 2).unwrap();
        let mut twice = once.clone();
        g.regenerate_warm(&mut twice, &base, &warm, &seg, InitializerKind::Cometa, 2).unwrap();
        assert_eq!(once.item_table.weights, twice.item_table.weights);
    }

    #[test]
    fn kind_names_round_trip() {
        for kind in InitializerKind::ALL {
            assert_eq!(kind.name().parse::<InitializerKind>().unwrap(), kind);
        }
        assert!("bogus".parse::<InitializerKind>().is_err());
    }
}
