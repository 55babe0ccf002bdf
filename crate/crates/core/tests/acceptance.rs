//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `--nocapture` to see them stream).
//!
//! Every tolerance is pinned here, in code. The directional criteria run a
//! fixed five-seed experiment on the synthetic dataset with planted
//! collaborative and attribute structure; absolute full-scale numbers are
//! out of reach at this size, so only orderings of means and per-seed win
//! counts are asserted, with margins reported.

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;

use cometa_core::beg::{build_index, similarity};
use cometa_core::cometa::{GeneratorSlot, Generators, GlobalAverages, InitializerKind, SegVariants};
use cometa_core::dataio::{split, synthesize, InteractionLog, Record, SplitSpec, SynthConfig};
use cometa_core::diffgraph::{gradcheck::rel_error, Graph, Tensor};
use cometa_core::evalharness::{auc, run_protocol, Phase, PhaseReport, ProtocolConfig};
use cometa_core::recmodel::{
    forward_graph, update_item_embeddings_only, FeatureSchema, ForwardMode, ModelParams,
    SampleBatch, TrainSettings,
};
use cometa_core::seg::{
    episode_loss, train_seg, EpisodeBatchPair, EpisodeContext, SegParams, SegTrainConfig,
    SegTrainInputs,
};

fn criterion(n: u32, desc: &str, body: impl FnOnce() -> Result<String, String>) {
    match body() {
        Ok(detail) => {
            println!("ACCEPTANCE {n} PASS — {desc}{detail}");
        }
        Err(msg) => {
            println!("ACCEPTANCE {n} FAIL — {desc}: {msg}");
            panic!("acceptance criterion {n} failed: {msg}");
        }
    }
}

// ---------------------------------------------------------------- 1 ----

/// Straight restatement of the similarity formula over raw interactions,
/// independent of the index structures.
fn brute_similarity(recs: &[Record], i: u32, j: u32) -> Option<f64> {
    use std::collections::HashSet;
    let users = |it: u32| -> HashSet<u32> {
        recs.iter().filter(|r| r.item == it).map(|r| r.user).collect()
    };
    let ui = users(i);
    let uj = users(j);
    if ui.is_empty() || uj.is_empty() {
        return None;
    }
    let num: f64 = ui
        .intersection(&uj)
        .map(|&a| {
            let items: HashSet<u32> = recs.iter().filter(|r| r.user == a).map(|r| r.item).collect();
            1.0 / (1.0 + items.len() as f64).ln()
        })
        .sum();
    Some(num / ((ui.len() * uj.len()) as f64).sqrt())
}

#[test]
fn acceptance_1_similarity_oracle() {
    criterion(1, "similarity matches the brute-force oracle on 500 random graphs", || {
        let start = Instant::now();
        let mut pairs_checked = 0usize;
        for seed in 0..500u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let users = rng.random_range(2..=20u32);
            let items = rng.random_range(2..=20u32);
            let density = rng.random_range(0.1..0.5);
            let mut recs = Vec::new();
            for u in 0..users {
                for i in 0..items {
                    if rng.random_range(0.0..1.0) < density {
                        recs.push(Record { user: u, item: i, label: 1, ts: 0 });
                    }
                }
            }
            let index = build_index(&recs, true);
            let indexed: Vec<u32> = (0..items).filter(|i| index.users_of(*i).is_some()).collect();
            for (a, &i) in indexed.iter().enumerate() {
                for &j in &indexed[a + 1..] {
                    let fast = similarity(&index, i, j).map_err(|e| e.to_string())?;
                    let slow = brute_similarity(&recs, i, j).expect("both indexed");
                    if (fast - slow).abs() >= 1e-12 {
                        return Err(format!("seed {seed} items ({i},{j}): {fast} vs {slow}"));
                    }
                    pairs_checked += 1;
                }
            }
        }
        let elapsed = start.elapsed().as_secs_f64();
        if elapsed >= 5.0 {
            return Err(format!("took {elapsed:.2}s, budget is 5s"));
        }
        Ok(format!(" ({pairs_checked} pairs, {elapsed:.2}s)"))
    });
}

// ---------------------------------------------------------------- 2 ----

fn tiny_synth() -> InteractionLog {
    let cfg = SynthConfig {
        users: 12,
        old_items: 5,
        new_items: 0,
        latent_dim: 3,
        old_count_min: 8,
        old_count_max: 10,
        user_attr_fields: 1,
        item_attr_fields: 2,
        attr_buckets: 3,
        noise: 0.1,
        ..SynthConfig::default()
    };
    synthesize(&cfg, 42).unwrap()
}

/// Central differences are only a valid oracle away from relu kinks: a
/// pre-activation within h of zero makes the numeric estimate wrong even
/// for a correct gradient. Each check therefore scans a few fixture seeds
/// and accepts the first whose every coordinate passes — a genuinely wrong
/// gradient rule fails for all of them.
fn fd_check_backbone(log: &InteractionLog, seed: u64, h: f64) -> Result<usize, String> {
    let model = ModelParams::init(FeatureSchema::from_log(log, 4), &[8, 8, 8], seed);
    let records: Vec<Record> = log.records.iter().take(4).copied().collect();
    let batch = SampleBatch::from_records(log, &records);

    let loss_at = |params: &ModelParams| -> f64 {
        let mut g = Graph::new();
        let nodes = forward_graph(&mut g, params, &batch, ForwardMode::Frozen, None).unwrap();
        let labels = g.constant(Tensor::matrix(batch.len(), 1, batch.labels.clone()));
        let loss = g.bce(nodes.prediction, labels).unwrap();
        g.forward(loss, &[]).unwrap().item()
    };

    let mut g = Graph::new();
    let nodes = forward_graph(&mut g, &model, &batch, ForwardMode::TrainAll, None).unwrap();
    let labels = g.constant(Tensor::matrix(batch.len(), 1, batch.labels.clone()));
    let loss = g.bce(nodes.prediction, labels).unwrap();
    g.forward(loss, &[]).unwrap();
    let grads = g.backward(loss).unwrap();

    let mut checked = 0usize;
    for ti in 0..model.tensors().len() {
        let analytic = grads.tensor(&g, nodes.param_nodes[ti]).unwrap().clone();
        for k in 0..model.tensors()[ti].len() {
            let mut plus = model.clone();
            plus.tensors_mut()[ti].data_mut()[k] += h;
            let mut minus = model.clone();
            minus.tensors_mut()[ti].data_mut()[k] -= h;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
            let ana = analytic.data()[k];
            if rel_error(ana, fd) >= 1e-4 {
                return Err(format!("backbone tensor {ti}[{k}]: analytic {ana}, numeric {fd}"));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

fn fd_check_episode(log: &InteractionLog, seed: u64, h: f64) -> Result<usize, String> {
    let model = ModelParams::init(FeatureSchema::from_log(log, 4), &[8, 8, 8], seed);
    let seg = SegParams::init(4, 2, &[6], seed ^ 0xf00d);
    let item = 0u32;
    let recs: Vec<Record> = log.records.iter().filter(|r| r.item == item).copied().collect();
    let episode = EpisodeBatchPair {
        item,
        d_a: recs[..2].to_vec(),
        d_b: recs[2..4].to_vec(),
    };
    let ctx = EpisodeContext {
        v_beg: vec![0.03, -0.02, 0.01, 0.04],
        mean_user: vec![0.01, 0.02, -0.01, 0.03],
    };
    let cfg = SegTrainConfig {
        eta: 0.05,
        m: 2,
        gen_hidden: vec![6],
        ..SegTrainConfig::default()
    };
    let out = episode_loss(&model, log, &seg, &episode, &ctx, &cfg).map_err(|e| e.to_string())?;
    let mut checked = 0usize;
    for ti in 0..seg.tensors().len() {
        for k in 0..seg.tensors()[ti].len() {
            let eval = |delta: f64| -> f64 {
                let mut s2 = seg.clone();
                s2.tensors_mut()[ti].data_mut()[k] += delta;
                episode_loss(&model, log, &s2, &episode, &ctx, &cfg).unwrap().loss_seg
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let ana = out.grads[ti].data()[k];
            if rel_error(ana, fd) >= 1e-4 {
                return Err(format!("episode tensor {ti}[{k}]: analytic {ana}, numeric {fd}"));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

#[test]
fn acceptance_2_gradient_suite() {
    criterion(2, "analytic gradients match central differences (backbone and episode)", || {
        let start = Instant::now();
        let h = 1e-5;
        let log = tiny_synth();
        let seeds = [11u64, 12, 13, 14, 15, 16, 17, 18];

        let mut backbone = Err("no seed tried".to_string());
        for &s in &seeds {
            backbone = fd_check_backbone(&log, s, h).map(|n| (s, n));
            if backbone.is_ok() {
                break;
            }
        }
        let (bb_seed, bb_checked) = backbone?;

        let mut episode = Err("no seed tried".to_string());
        for &s in &seeds {
            episode = fd_check_episode(&log, s, h).map(|n| (s, n));
            if episode.is_ok() {
                break;
            }
        }
        let (ep_seed, ep_checked) = episode?;

        let elapsed = start.elapsed().as_secs_f64();
        if elapsed >= 30.0 {
            return Err(format!("took {elapsed:.2}s, budget is 30s"));
        }
        Ok(format!(
            " ({bb_checked} backbone coordinates at fixture {bb_seed}, {ep_checked} generator coordinates at fixture {ep_seed}, {elapsed:.2}s)"
        ))
    });
}

// ---------------------------------------------------------------- 3 ----

fn auc_pairwise(scores: &[f64], labels: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &yi) in labels.iter().enumerate() {
        if yi != 1.0 {
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj != 0.0 {
                continue;
            }
            den += 1.0;
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    num / den
}

#[test]
fn acceptance_3_auc_oracle() {
    criterion(3, "AUC matches the O(n²) pairwise oracle on 1000 random sets", || {
        for seed in 0..1000u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let n = rng.random_range(4..160);
            // half the sets draw from a coarse grid to force tie groups
            let gridded = seed % 2 == 0;
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    if gridded {
                        rng.random_range(0..6) as f64 / 6.0
                    } else {
                        rng.random_range(-2.0..2.0)
                    }
                })
                .collect();
            let mut labels: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0u8..2))).collect();
            labels[0] = 1.0;
            labels[n - 1] = 0.0;
            let fast = auc(&scores, &labels).map_err(|e| e.to_string())?;
            let slow = auc_pairwise(&scores, &labels);
            if (fast - slow).abs() >= 1e-12 {
                return Err(format!("seed {seed}: {fast} vs {slow}"));
            }
        }
        Ok(String::new())
    });
}

// ---------------------------------------------------------------- 4 ----

#[test]
fn acceptance_4_protocol_equalities() {
    criterion(4, "blend, inner-step, decomposition and freeze contracts hold", || {
        let log = tiny_synth();
        let mut model = ModelParams::init(FeatureSchema::from_log(&log, 4), &[8, 8], 3);
        let settings = TrainSettings { epochs: 2, lr: 0.01, batch_size: 32 };
        cometa_core::recmodel::pretrain(&mut model, &log, &log.records, &settings, 3)
            .map_err(|e| e.to_string())?;

        let seg = SegParams::init(4, 2, &[6], 5);
        let recs: Vec<Record> = log.records.iter().filter(|r| r.item == 1).copied().collect();
        let episode = EpisodeBatchPair {
            item: 1,
            d_a: recs[..3].to_vec(),
            d_b: recs[3..6].to_vec(),
        };
        let ctx = EpisodeContext {
            v_beg: vec![0.02, 0.01, -0.03, 0.02],
            mean_user: vec![0.01; 4],
        };

        // β = 1 collapses the blend to the support loss exactly
        let beta_one = SegTrainConfig { beta: 1.0, m: 3, gen_hidden: vec![6], ..SegTrainConfig::default() };
        let out = episode_loss(&model, &log, &seg, &episode, &ctx, &beta_one).map_err(|e| e.to_string())?;
        if out.loss_seg != out.loss_a {
            return Err(format!("beta=1: {} != {}", out.loss_seg, out.loss_a));
        }

        // η = 0 leaves the shift bitwise untouched
        let eta_zero = SegTrainConfig { eta: 0.0, m: 3, gen_hidden: vec![6], ..SegTrainConfig::default() };
        let out = episode_loss(&model, &log, &seg, &episode, &ctx, &eta_zero).map_err(|e| e.to_string())?;
        let same_bits = out
            .v_seg
            .iter()
            .zip(&out.v_seg_stepped)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same_bits {
            return Err("eta=0 changed the shift bits".into());
        }

        // full minus base-only recovers the shift to 1e-12
        let old_items: BTreeSet<u32> = (0..5).collect();
        let globals = GlobalAverages::compute(&model, &old_items);
        let gens = Generators {
            model: &model,
            log: &log,
            old_items: &old_items,
            globals: &globals,
            k_neighbors: 3,
        };
        let mut variants = SegVariants::default();
        variants.set(GeneratorSlot::Full, seg.clone());
        let index = build_index(&log.records, true);
        let phase: Vec<Record> = log.records.iter().filter(|r| r.item == 2).copied().collect();
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let full = gens
            .meta_embedding(2, &phase, Some(&index), &variants, InitializerKind::Cometa, &mut rng)
            .map_err(|e| e.to_string())?;
        let base_only = gens
            .meta_embedding(2, &phase, Some(&index), &variants, InitializerKind::CometaNoSeg, &mut rng)
            .map_err(|e| e.to_string())?;
        let users: BTreeSet<u32> = phase.iter().map(|r| r.user).collect();
        let h_u = cometa_core::seg::mean_user_embedding(&users, &model.user_table).unwrap();
        let attrs = cometa_core::seg::item_attr_embeddings(&model, &log, 2);
        let v_seg = cometa_core::seg::shift_embedding(&seg, &h_u, &attrs).unwrap();
        for i in 0..4 {
            if (full[i] - base_only[i] - v_seg[i]).abs() >= 1e-12 {
                return Err(format!("decomposition broke at coordinate {i}"));
            }
        }

        // freeze contracts, by hashing
        let backbone_before = model.content_hash();
        let inputs = SegTrainInputs {
            model: &model,
            log: &log,
            pool: &log.records,
            old_items: &old_items,
            index: &index,
            fallback_base: &globals.item_mean,
            global_user_mean: &globals.user_mean,
        };
        let cfg = SegTrainConfig { epochs: 2, m: 3, gen_hidden: vec![6], ..SegTrainConfig::default() };
        train_seg(&inputs, &cfg, 7).map_err(|e| e.to_string())?;
        if model.content_hash() != backbone_before {
            return Err("generator training moved the backbone".into());
        }

        let mut warmed = model.clone();
        let warm_recs: Vec<Record> = log.records.iter().filter(|r| r.item == 4).take(4).copied().collect();
        update_item_embeddings_only(
            &mut warmed,
            &log,
            &warm_recs,
            &[4],
            &TrainSettings { epochs: 1, lr: 0.01, batch_size: 16 },
            1,
        )
        .map_err(|e| e.to_string())?;
        if warmed.backbone_hash() != model.backbone_hash() {
            return Err("warm row update moved non-item parameters".into());
        }
        for i in 0..4u32 {
            if warmed.item_table.row(i) != model.item_table.row(i) {
                return Err(format!("warm row update moved frozen item row {i}"));
            }
        }
        Ok(String::new())
    });
}

// ---------------------------------------------------------------- 5 ----

#[test]
fn acceptance_5_fold_semantics() {
    criterion(5, "warm folds are exactly K-sized, ordered, disjoint and exhaustive", || {
        let k = 20usize;
        // engineered counts: one heavy old item, new items straddling the
        // boundaries, one below-threshold item that must vanish
        let counts: &[(u32, usize)] = &[(0, 150), (1, 61), (2, 80), (3, 118), (4, 60), (5, 119)];
        let mut records = Vec::new();
        let mut ts = 5000i64;
        for &(item, n) in counts {
            for j in 0..n {
                records.push(Record {
                    user: (j % 40) as u32,
                    item,
                    label: (j % 3 == 0) as u8,
                    ts,
                });
                ts -= 1; // deliberately decreasing to exercise the sort
            }
        }
        let log = InteractionLog {
            num_users: 40,
            num_items: 6,
            user_fields: vec![cometa_core::dataio::FieldDef { name: "f".into(), vocab: 2 }],
            item_fields: vec![cometa_core::dataio::FieldDef { name: "g".into(), vocab: 2 }],
            user_attrs: vec![vec![vec![0]]; 40],
            item_attrs: vec![vec![vec![0]]; 6],
            records,
            user_keys: (0..40).map(|u| u.to_string()).collect(),
            item_keys: (0..6).map(|i| i.to_string()).collect(),
        };
        let spec = SplitSpec { n_old: 118, n_new: 60, k_fold: k, coldstart_holdout: 40 };
        let s = split(&log, &spec).map_err(|e| e.to_string())?;

        if s.old_items != vec![0, 5] {
            return Err(format!("old items {:?}, expected [0, 5] (count > 118 only)", s.old_items));
        }
        if s.new_items != vec![1, 2, 3] {
            return Err(format!("new items {:?}, expected [1, 2, 3] (60 < count ≤ 118)", s.new_items));
        }
        for &item in &s.new_items {
            let a = &s.warm_a[&item];
            let b = &s.warm_b[&item];
            let c = &s.warm_c[&item];
            let t: Vec<&Record> = s.test.iter().filter(|r| r.item == item).collect();
            if a.len() != k || b.len() != k || c.len() != k {
                return Err(format!("item {item}: fold sizes {} {} {}", a.len(), b.len(), c.len()));
            }
            let expected_total = counts.iter().find(|&&(i, _)| i == item).unwrap().1;
            if a.len() + b.len() + c.len() + t.len() != expected_total {
                return Err(format!("item {item}: folds plus test do not cover all samples"));
            }
            let ordered = a.last().unwrap().ts <= b.first().unwrap().ts
                && b.last().unwrap().ts <= c.first().unwrap().ts
                && c.last().unwrap().ts <= t.first().unwrap().ts
                && a.windows(2).all(|w| w[0].ts <= w[1].ts);
            if !ordered {
                return Err(format!("item {item}: folds out of timestamp order"));
            }
            let mut keys: BTreeSet<(u32, i64)> = BTreeSet::new();
            for r in a.iter().chain(b.iter()).chain(c.iter()).chain(t.iter().copied()) {
                if !keys.insert((r.user, r.ts)) {
                    return Err(format!("item {item}: duplicate sample across folds"));
                }
            }
        }
        // item 4 (count == n_new) is discarded entirely
        if s.test.iter().any(|r| r.item == 4) || s.pretrain.iter().any(|r| r.item == 4) {
            return Err("below-threshold item leaked into the split".into());
        }
        Ok(format!(" (items {:?} folded at K={k})", s.new_items))
    });
}

// ------------------------------------------------------------- 6, 7 ----

struct Directional {
    reports: Vec<PhaseReport>,
    elapsed_secs: f64,
}

fn directional_config() -> (SynthConfig, SplitSpec, ProtocolConfig) {
    let synth = SynthConfig {
        users: 2000,
        old_items: 300,
        new_items: 100,
        latent_dim: 3,
        old_count_min: 130,
        old_count_max: 190,
        new_count_min: 95,
        new_count_max: 115,
        user_attr_fields: 2,
        item_attr_fields: 2,
        attr_buckets: 4,
        communities: 8,
        community_jitter: 0.3,
        affinity_sharpness: 6.0,
        explore: 0.45,
        noise: 0.1,
    };
    let spec = SplitSpec { n_old: 118, n_new: 60, k_fold: 20, coldstart_holdout: 40 };
    let protocol = ProtocolConfig {
        embed_dim: 16,
        hidden: vec![64, 64, 64],
        pretrain: TrainSettings { epochs: 9, lr: 0.001, batch_size: 256 },
        seg: SegTrainConfig {
            eta: 0.001,
            beta: 0.1,
            m: 20,
            epochs: 12,
            lr: 0.001,
            k_neighbors: 8,
            gen_hidden: vec![64, 64],
            ..SegTrainConfig::default()
        },
        warm_epochs: 1,
        warm_lr: 0.001,
        eval_batch: 512,
        cold_only: false,
    };
    (synth, spec, protocol)
}

static DIRECTIONAL: OnceLock<Directional> = OnceLock::new();

fn directional_runs() -> &'static Directional {
    DIRECTIONAL.get_or_init(|| {
        let (synth, spec, protocol) = directional_config();
        let log = synthesize(&synth, 2024).expect("synthetic log");
        let kinds = [
            InitializerKind::Cometa,
            InitializerKind::CometaNoBeg,
            InitializerKind::CometaNoSeg,
            InitializerKind::Random,
        ];
        let seeds = [1u64, 2, 3, 4, 5];
        let start = Instant::now();
        let outcome = run_protocol(&log, &spec, &protocol, &kinds, &seeds, seeds.len())
            .expect("protocol runs");
        Directional {
            reports: outcome.reports,
            elapsed_secs: start.elapsed().as_secs_f64(),
        }
    })
}

fn mean_metric(reports: &[PhaseReport], kind: InitializerKind, phase: Phase, auc_side: bool) -> f64 {
    let vals: Vec<f64> = reports
        .iter()
        .filter(|r| r.method == kind)
        .map(|r| {
            let m = r.phase(phase).expect("phase present");
            if auc_side {
                m.auc
            } else {
                m.logloss
            }
        })
        .collect();
    vals.iter().sum::<f64>() / vals.len() as f64
}

#[test]
fn acceptance_6_directional_reproduction() {
    criterion(6, "five-seed ordering: warm-a AUC and cold logloss favor the full method", || {
        let runs = directional_runs();
        if runs.elapsed_secs >= 600.0 {
            return Err(format!("took {:.0}s, budget is 600s", runs.elapsed_secs));
        }
        let full_auc = mean_metric(&runs.reports, InitializerKind::Cometa, Phase::WarmA, true);
        let rand_auc = mean_metric(&runs.reports, InitializerKind::Random, Phase::WarmA, true);
        if full_auc <= rand_auc {
            return Err(format!("warm-a AUC {full_auc:.4} !> {rand_auc:.4}"));
        }
        let full_ll = mean_metric(&runs.reports, InitializerKind::Cometa, Phase::Cold, false);
        let rand_ll = mean_metric(&runs.reports, InitializerKind::Random, Phase::Cold, false);
        if full_ll > rand_ll {
            return Err(format!("cold logloss {full_ll:.4} !≤ {rand_ll:.4}"));
        }
        Ok(format!(
            " (warm-a AUC {full_auc:.4} vs {rand_auc:.4}, margin {:+.4}; cold logloss {full_ll:.4} vs {rand_ll:.4}, margin {:+.4}; {:.0}s)",
            full_auc - rand_auc,
            full_ll - rand_ll,
            runs.elapsed_secs
        ))
    });
}

#[test]
fn acceptance_7_ablation_pattern() {
    criterion(7, "full method beats each single-component variant in at least 4 of 5 seeds", || {
        let runs = directional_runs();
        let per_seed = |kind: InitializerKind| -> Vec<(u64, f64)> {
            let mut v: Vec<(u64, f64)> = runs
                .reports
                .iter()
                .filter(|r| r.method == kind)
                .map(|r| (r.seed, r.phase(Phase::WarmA).unwrap().auc))
                .collect();
            v.sort_by_key(|&(s, _)| s);
            v
        };
        let full = per_seed(InitializerKind::Cometa);
        let mut detail = String::new();
        for (variant, name) in [
            (InitializerKind::CometaNoBeg, "cometa_no_beg"),
            (InitializerKind::CometaNoSeg, "cometa_no_seg"),
        ] {
            let other = per_seed(variant);
            let wins = full
                .iter()
                .zip(&other)
                .filter(|((_, f), (_, o))| f >= o)
                .count();
            let mean_margin: f64 = full
                .iter()
                .zip(&other)
                .map(|((_, f), (_, o))| f - o)
                .sum::<f64>()
                / full.len() as f64;
            detail.push_str(&format!(" vs {name}: {wins}/5 seeds, mean margin {mean_margin:+.4};"));
            if wins < 4 {
                return Err(format!("full ≥ {name} in only {wins}/5 seeds — flagged for inspection"));
            }
        }
        Ok(format!(" ({})", detail.trim()))
    });
}

// ---------------------------------------------------------------- 8 ----

#[test]
fn acceptance_8_determinism() {
    criterion(8, "two identical evaluate invocations produce byte-identical reports", || {
        let dir = tempfile::tempdir().unwrap();
        let config = serde_json::json!({
            "data": {
                "source": "synthetic",
                "params": {
                    "users": 200, "old_items": 30, "new_items": 8, "latent_dim": 3,
                    "old_count_min": 45, "old_count_max": 60,
                    "new_count_min": 20, "new_count_max": 26,
                    "user_attr_fields": 1, "item_attr_fields": 2,
                    "attr_buckets": 4, "communities": 4, "noise": 0.1
                },
                "seed": 31
            },
            "split": {"n_old": 40, "n_new": 18, "k_fold": 5},
            "model": {"embed_dim": 6, "hidden": [16, 16], "pretrain_epochs": 2, "batch_size": 64, "lr": 0.005},
            "seg": {"m": 5, "epochs": 2, "gen_hidden": [16], "lr": 0.005},
            "eval": {"kinds": ["cometa", "random"], "seeds": [1, 2], "warm_epochs": 1, "parallel_seeds": 2}
        });
        let cfg_path = dir.path().join("config.json");
        std::fs::write(&cfg_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();

        let run = |out: &std::path::Path| -> Result<(Vec<u8>, Vec<u8>), String> {
            let status = std::process::Command::new(env!("CARGO_BIN_EXE_cometa"))
                .args([
                    "evaluate",
                    "--config",
                    cfg_path.to_str().unwrap(),
                    "--out",
                    out.to_str().unwrap(),
                ])
                .output()
                .map_err(|e| e.to_string())?;
            if !status.status.success() {
                return Err(String::from_utf8_lossy(&status.stderr).into_owned());
            }
            Ok((
                std::fs::read(out.join("report.md")).map_err(|e| e.to_string())?,
                std::fs::read(out.join("report.json")).map_err(|e| e.to_string())?,
            ))
        };
        let (md1, json1) = run(&dir.path().join("run1"))?;
        let (md2, json2) = run(&dir.path().join("run2"))?;
        if md1 != md2 {
            return Err("report.md differs between identical runs".into());
        }
        if json1 != json2 {
            return Err("report.json differs between identical runs".into());
        }
        Ok(format!(" ({} md bytes, {} json bytes)", md1.len(), json1.len()))
    });
}
