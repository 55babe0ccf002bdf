//! The staged cold/warm evaluation protocol.
//!
//! Per seed and per initializer: pre-train the backbone on old items, train
//! whichever shift-generator variants the requested initializers need, set
//! the new-item rows cold and score the test set, optionally regenerate the
//! meta embeddings once warm interactions exist, then fine-tune the
//! new-item rows on warm-a/b/c — scoring the fixed test set after every
//! stage. Methods never share mutable state: each starts from its own copy
//! of the pre-trained checkpoint.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::beg::build_index;
use crate::cometa::{GeneratorSlot, Generators, GlobalAverages, InitializerKind, SegVariants};
use crate::dataio::{split, InteractionLog, Record, SplitResult, SplitSpec, WarmFold};
use crate::recmodel::{
    predict_records, update_item_embeddings_only, FeatureSchema, ModelParams, TrainSettings,
};
use crate::seg::{train_seg, BaseSource, HuSource, SegTrainConfig, SegTrainInputs, TrainedSeg};

use super::metrics::{auc, logloss};
use super::EvalError;

/// Per-variant episode-loss curves from generator training.
pub type GeneratorCurves = Vec<(GeneratorSlot, Vec<crate::seg::EpochLosses>)>;

/// Everything the protocol needs beyond data and seeds.
#[derive(Debug, Clone)]
pub struct ProtocolConfig {
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub pretrain: TrainSettings,
    pub seg: SegTrainConfig,
    /// epochs per warm update step (one, conventionally)
    pub warm_epochs: usize,
    pub warm_lr: f64,
    pub eval_batch: usize,
    /// stop after the cold evaluation
    pub cold_only: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden: vec![64, 64, 64],
            pretrain: TrainSettings::default(),
            seg: SegTrainConfig::default(),
            warm_epochs: 1,
            warm_lr: 0.001,
            eval_batch: 512,
            cold_only: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseMetrics {
    pub auc: f64,
    pub logloss: f64,
}

/// Test-set metrics of one (method, seed) run across the four phases.
/// Warm phases are absent only for cold-only runs. Wall time is runtime
/// telemetry and deliberately excluded from emitted report files.
#[derive(Debug, Clone)]
pub struct PhaseReport {
    pub method: InitializerKind,
    pub seed: u64,
    pub cold: PhaseMetrics,
    pub warm_a: Option<PhaseMetrics>,
    pub warm_b: Option<PhaseMetrics>,
    pub warm_c: Option<PhaseMetrics>,
    pub wall_time_secs: f64,
}

impl PhaseReport {
    pub fn phase(&self, phase: Phase) -> Option<PhaseMetrics> {
        match phase {
            Phase::Cold => Some(self.cold),
            Phase::WarmA => self.warm_a,
            Phase::WarmB => self.warm_b,
            Phase::WarmC => self.warm_c,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Cold,
    WarmA,
    WarmB,
    WarmC,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Cold, Phase::WarmA, Phase::WarmB, Phase::WarmC];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Cold => "cold",
            Phase::WarmA => "warm_a",
            Phase::WarmB => "warm_b",
            Phase::WarmC => "warm_c",
        }
    }
}

#[derive(Debug)]
pub struct ProtocolOutcome {
    pub reports: Vec<PhaseReport>,
    /// diagnostic notes (e.g. a method whose mean AUC is not monotone
    /// across phases); never a failure by themselves
    pub warnings: Vec<String>,
}

fn fnv(bytes: impl Iterator<Item = u8>) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn records_hash(records: &[Record]) -> u64 {
    fnv(records.iter().flat_map(|r| {
        r.user
            .to_le_bytes()
            .into_iter()
            .chain(r.item.to_le_bytes())
            .chain([r.label])
            .chain(r.ts.to_le_bytes())
    }))
}

fn evaluate(
    model: &ModelParams,
    log: &InteractionLog,
    test: &[Record],
    batch: usize,
) -> Result<PhaseMetrics, EvalError> {
    let scores = predict_records(model, log, test, batch)?;
    let labels: Vec<f64> = test.iter().map(|r| r.label as f64).collect();
    Ok(PhaseMetrics {
        auc: auc(&scores, &labels)?,
        logloss: logloss(&scores, &labels)?,
    })
}

/// Seed-scoped constants shared by every method in one run.
struct SeedStage<'a> {
    log: &'a InteractionLog,
    split: &'a SplitResult,
    cfg: &'a ProtocolConfig,
    pretrained: ModelParams,
    seg: SegVariants,
    seg_curves: GeneratorCurves,
    old_items: BTreeSet<u32>,
    new_items: Vec<u32>,
    base_interactions: Vec<Record>,
    globals: GlobalAverages,
}

/// Pre-trains the backbone and whatever generator variants the requested
/// kinds need, all seeded.
/// Trains the generator variants the requested kinds need against an
/// already pre-trained backbone (protocol step two).
pub fn train_generators(
    log: &InteractionLog,
    split: &SplitResult,
    cfg: &ProtocolConfig,
    kinds: &[InitializerKind],
    model: &ModelParams,
    seed: u64,
) -> Result<(SegVariants, GeneratorCurves), EvalError> {
    let old_items: BTreeSet<u32> = split.old_items.iter().copied().collect();
    let mut base_interactions = split.pretrain.clone();
    base_interactions.extend_from_slice(&split.coldstart);
    let index = build_index(&base_interactions, true);
    let globals = GlobalAverages::compute(model, &old_items);

    let mut slots: Vec<GeneratorSlot> = kinds.iter().filter_map(|k| k.generator_slot()).collect();
    slots.sort_by_key(|s| *s as u8);
    slots.dedup();

    let mut seg = SegVariants::default();
    let mut seg_curves = Vec::new();
    for slot in slots {
        let mut seg_cfg = cfg.seg.clone();
        let salt = match slot {
            GeneratorSlot::Full => {
                seg_cfg.base_source = BaseSource::Neighbors;
                seg_cfg.hu_source = HuSource::ItemUsers;
                0x01
            }
            GeneratorSlot::NoBase => {
                seg_cfg.base_source = BaseSource::Zero;
                seg_cfg.hu_source = HuSource::ItemUsers;
                0x02
            }
            GeneratorSlot::AttrOnly => {
                seg_cfg.base_source = BaseSource::Zero;
                seg_cfg.hu_source = HuSource::GlobalAverage;
                0x03
            }
        };
        let inputs = SegTrainInputs {
            model,
            log,
            pool: &split.coldstart,
            old_items: &old_items,
            index: &index,
            fallback_base: &globals.item_mean,
            global_user_mean: &globals.user_mean,
        };
        let TrainedSeg { params, curve } = train_seg(&inputs, &seg_cfg, seed.wrapping_add(salt))?;
        seg.set(slot, params);
        seg_curves.push((slot, curve));
    }
    Ok((seg, seg_curves))
}

fn prepare_seed<'a>(
    log: &'a InteractionLog,
    split: &'a SplitResult,
    cfg: &'a ProtocolConfig,
    kinds: &[InitializerKind],
    seed: u64,
) -> Result<SeedStage<'a>, EvalError> {
    let schema = FeatureSchema::from_log(log, cfg.embed_dim);
    let mut model = ModelParams::init(schema, &cfg.hidden, seed);
    crate::recmodel::pretrain(&mut model, log, &split.pretrain, &cfg.pretrain, seed)?;
    let (seg, seg_curves) = train_generators(log, split, cfg, kinds, &model, seed)?;
    Ok(SeedStage::from_parts(log, split, cfg, model, seg, seg_curves))
}

impl<'a> SeedStage<'a> {
    fn from_parts(
        log: &'a InteractionLog,
        split: &'a SplitResult,
        cfg: &'a ProtocolConfig,
        pretrained: ModelParams,
        seg: SegVariants,
        seg_curves: GeneratorCurves,
    ) -> Self {
        let old_items: BTreeSet<u32> = split.old_items.iter().copied().collect();
        let mut base_interactions = split.pretrain.clone();
        base_interactions.extend_from_slice(&split.coldstart);
        let globals = GlobalAverages::compute(&pretrained, &old_items);
        SeedStage {
            log,
            split,
            cfg,
            pretrained,
            seg,
            seg_curves,
            old_items,
            new_items: split.new_items.clone(),
            base_interactions,
            globals,
        }
    }
}

impl SeedStage<'_> {
    /// Steps 3–7 for one method, from a fresh copy of the checkpoint.
    fn run_method(&self, kind: InitializerKind, seed: u64) -> Result<PhaseReport, EvalError> {
        let start = Instant::now();
        let cfg = self.cfg;
        let mut model = self.pretrained.clone();
        assert_eq!(
            model.content_hash(),
            self.pretrained.content_hash(),
            "methods must start from the same checkpoint"
        );
        let gens = Generators {
            model: &self.pretrained,
            log: self.log,
            old_items: &self.old_items,
            globals: &self.globals,
            k_neighbors: cfg.seg.k_neighbors,
        };
        let test = &self.split.test;
        let test_hash = records_hash(test);

        gens.initialize_cold(&mut model, &self.new_items, &self.seg, kind, seed ^ 0xc01d)?;
        let cold = evaluate(&model, self.log, test, cfg.eval_batch)?;

        let mut warm = [None, None, None];
        if !cfg.cold_only {
            if kind.regenerates_warm() {
                gens.regenerate_warm(
                    &mut model,
                    &self.base_interactions,
                    &self.split.warm_a,
                    &self.seg,
                    kind,
                    seed ^ 0x3e9e,
                )?;
            }
            for (i, fold) in [WarmFold::A, WarmFold::B, WarmFold::C].into_iter().enumerate() {
                let fold_records = self.split.warm_flat(fold);
                // small folds train as a single minibatch
                let settings = TrainSettings {
                    epochs: cfg.warm_epochs,
                    lr: cfg.warm_lr,
                    batch_size: fold_records.len().min(256),
                };
                if cfg.warm_epochs > 0 {
                    update_item_embeddings_only(
                        &mut model,
                        self.log,
                        &fold_records,
                        &self.new_items,
                        &settings,
                        seed ^ (0xa11 + i as u64),
                    )?;
                }
                assert_eq!(records_hash(test), test_hash, "test set must not drift between phases");
                warm[i] = Some(evaluate(&model, self.log, test, cfg.eval_batch)?);
            }
        }

        Ok(PhaseReport {
            method: kind,
            seed,
            cold,
            warm_a: warm[0],
            warm_b: warm[1],
            warm_c: warm[2],
            wall_time_secs: start.elapsed().as_secs_f64(),
        })
    }
}

/// Runs the full protocol for every (seed, kind) pair. Seeds are
/// independent; `parallel` > 1 fans them out over threads without changing
/// the output.
pub fn run_protocol(
    log: &InteractionLog,
    spec: &SplitSpec,
    cfg: &ProtocolConfig,
    kinds: &[InitializerKind],
    seeds: &[u64],
    parallel: usize,
) -> Result<ProtocolOutcome, EvalError> {
    if kinds.is_empty() {
        return Err(EvalError::NoKinds);
    }
    let split = split(log, spec)?;

    let run_seed = |seed: u64| -> Result<Vec<PhaseReport>, EvalError> {
        let stage = prepare_seed(log, &split, cfg, kinds, seed)?;
        kinds.iter().map(|&k| stage.run_method(k, seed)).collect()
    };

    let mut reports = Vec::new();
    if parallel <= 1 || seeds.len() <= 1 {
        for &seed in seeds {
            reports.extend(run_seed(seed)?);
        }
    } else {
        let results: Vec<Result<Vec<PhaseReport>, EvalError>> = std::thread::scope(|scope| {
            let handles: Vec<_> = seeds.iter().map(|&s| scope.spawn(move || run_seed(s))).collect();
            handles.into_iter().map(|h| h.join().expect("seed worker panicked")).collect()
        });
        for r in results {
            reports.extend(r?);
        }
    }

    let warnings = monotonicity_warnings(kinds, &reports);
    Ok(ProtocolOutcome { reports, warnings })
}

/// Diagnostic only: the expected pattern is non-decreasing mean AUC from
/// cold through warm-c; a violation is reported, never a failure.
fn monotonicity_warnings(kinds: &[InitializerKind], reports: &[PhaseReport]) -> Vec<String> {
    let mut warnings = Vec::new();
    for &kind in kinds {
        let of_kind: Vec<&PhaseReport> = reports.iter().filter(|r| r.method == kind).collect();
        let mean = |phase: Phase| -> Option<f64> {
            let vals: Vec<f64> = of_kind.iter().filter_map(|r| r.phase(phase)).map(|m| m.auc).collect();
            (vals.len() == of_kind.len() && !vals.is_empty())
                .then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        let series: Vec<f64> = Phase::ALL.iter().filter_map(|&p| mean(p)).collect();
        if series.windows(2).any(|w| w[1] < w[0]) {
            warnings.push(format!(
                "method {kind}: mean test AUC is not non-decreasing across phases ({series:?})"
            ));
        }
    }
    warnings
}

/// Exposes the per-seed preparation for the step-by-step CLI pipeline.
pub struct PreparedSeed {
    pub model: ModelParams,
    pub seg: SegVariants,
    pub seg_curves: GeneratorCurves,
}

/// Pre-train plus generator training only (protocol steps before any
/// evaluation), for callers that persist intermediate artifacts.
pub fn prepare_only(
    log: &InteractionLog,
    spec: &SplitSpec,
    cfg: &ProtocolConfig,
    kinds: &[InitializerKind],
    seed: u64,
) -> Result<PreparedSeed, EvalError> {
    let split = split(log, spec)?;
    let stage = prepare_seed(log, &split, cfg, kinds, seed)?;
    Ok(PreparedSeed {
        model: stage.pretrained,
        seg: stage.seg,
        seg_curves: stage.seg_curves,
    })
}

/// Evaluation phases only (steps after pre-training), resuming from loaded
/// artifacts. Single seed by construction: the artifacts embody that seed.
pub fn run_protocol_prepared(
    log: &InteractionLog,
    spec: &SplitSpec,
    cfg: &ProtocolConfig,
    kinds: &[InitializerKind],
    seed: u64,
    prepared: PreparedSeed,
) -> Result<ProtocolOutcome, EvalError> {
    if kinds.is_empty() {
        return Err(EvalError::NoKinds);
    }
    let split = split(log, spec)?;
    let stage = SeedStage::from_parts(log, &split, cfg, prepared.model, prepared.seg, prepared.seg_curves);
    let reports: Vec<PhaseReport> = kinds
        .iter()
        .map(|&k| stage.run_method(k, seed))
        .collect::<Result<_, _>>()?;
    let warnings = monotonicity_warnings(kinds, &reports);
    Ok(ProtocolOutcome { reports, warnings })
}
