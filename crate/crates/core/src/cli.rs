//! Command implementations behind the `cometa` binary.
//!
//! The pipeline mirrors the experimental steps: `prepare` materializes the
//! split manifest, `pretrain` fits the backbone on old items, `train-cometa`
//! fits the embedding generators against a frozen checkpoint, `evaluate`
//! runs the cold/warm phases and writes the report files, `report` rebuilds
//! the Markdown view from a report.json. Exit codes: 0 success, 1 runtime
//! failure, 2 usage or config error.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::beg::{build_index, dump_neighbors, top_k_neighbors};
use crate::checkpoint::{self, CkptError};
use crate::cometa::InitializerKind;
use crate::config::{ConfigError, Overrides, RunConfig};
use crate::dataio::{split, DataError, SplitManifest};
use crate::evalharness::{
    build_report, emit_report, run_protocol, run_protocol_prepared, to_markdown, train_generators,
    EvalError, PreparedSeed, ReportSet,
};
use crate::recmodel::FeatureSchema;

/// Errors carrying their process exit code.
#[derive(Debug)]
pub enum CliError {
    /// exit code 2: bad invocation, bad config, missing or mismatched inputs
    Usage(String),
    /// exit code 1: the run itself failed
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<CkptError> for CliError {
    fn from(e: CkptError) -> Self {
        match e {
            CkptError::SchemaMismatch(_) | CkptError::Io { .. } | CkptError::BadMagic => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn write_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("cannot write {}: {e}", path.display()))
}

fn load_config(path: &Path, ov: &Overrides) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply(ov);
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("cometa-out"))
}

fn guard_overwrite(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

fn model_ckpt_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("model-seed{seed}.ckpt"))
}

fn cometa_ckpt_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("cometa-seed{seed}.ckpt"))
}

/// Loads the data, computes the split and writes the audit manifest.
pub fn cmd_prepare(config_path: &Path, ov: &Overrides, force: bool) -> Result<(), CliError> {
    let cfg = load_config(config_path, ov)?;
    let dir = out_dir(&cfg);
    let manifest_file = manifest_path(&dir);
    guard_overwrite(&manifest_file, force)?;

    let log = cfg.load_data()?;
    let spec = cfg.split_spec();
    let result = split(&log, &spec)?;
    let manifest = result.manifest(&spec);

    fs::create_dir_all(&dir).map_err(|e| write_err(&dir, e))?;
    let mut body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    body.push('\n');
    fs::write(&manifest_file, body).map_err(|e| write_err(&manifest_file, e))?;

    println!(
        "prepare: {} old items ({} pretrain / {} cold-start samples), {} new items, {} test samples",
        manifest.old_items.len(),
        manifest.pretrain_samples,
        manifest.coldstart_samples,
        manifest.new_items.len(),
        manifest.test_samples,
    );
    println!("prepare: manifest written to {}", manifest_file.display());
    Ok(())
}

/// Verifies that the manifest on disk matches the split this config
/// produces, so later stages cannot silently run against different data.
fn verify_manifest(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    let path = manifest_path(dir);
    let text = fs::read_to_string(&path).map_err(|_| {
        CliError::Usage(format!(
            "missing split manifest {}; run `cometa prepare` first",
            path.display()
        ))
    })?;
    let stored: SplitManifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("unreadable manifest {}: {e}", path.display())))?;
    let log = cfg.load_data()?;
    let spec = cfg.split_spec();
    let fresh = split(&log, &spec)?.manifest(&spec);
    if fresh != stored {
        return Err(CliError::Usage(format!(
            "manifest {} does not match this config's split; re-run `cometa prepare --force`",
            path.display()
        )));
    }
    Ok(())
}

/// Pre-trains the backbone per seed and writes seed-tagged checkpoints.
pub fn cmd_pretrain(config_path: &Path, ov: &Overrides, force: bool) -> Result<(), CliError> {
    let cfg = load_config(config_path, ov)?;
    let dir = out_dir(&cfg);
    verify_manifest(&cfg, &dir)?;
    let log = cfg.load_data()?;
    let spec = cfg.split_spec();
    let result = split(&log, &spec).map_err(|e| CliError::Usage(e.to_string()))?;
    let pcfg = cfg.protocol_config();

    for &seed in &cfg.eval.seeds {
        let path = model_ckpt_path(&dir, seed);
        guard_overwrite(&path, force)?;
        let schema = FeatureSchema::from_log(&log, pcfg.embed_dim);
        let mut model = crate::recmodel::ModelParams::init(schema, &pcfg.hidden, seed);
        let history = crate::recmodel::pretrain(&mut model, &log, &result.pretrain, &pcfg.pretrain, seed)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        for (epoch, loss) in history.iter().enumerate() {
            println!("pretrain[seed {seed}] epoch {epoch} loss {loss:.6}");
        }
        checkpoint::save(&path, &model, &Default::default())?;
        println!(
            "pretrain[seed {seed}]: checkpoint written to {} (hash {:016x})",
            path.display(),
            model.content_hash()
        );
    }
    Ok(())
}

/// Trains the generator variants against frozen checkpoints; emits the
/// combined checkpoint, a neighbor-list dump and the episode-loss curves.
pub fn cmd_train_cometa(
    config_path: &Path,
    ov: &Overrides,
    checkpoint_arg: Option<&Path>,
    force: bool,
) -> Result<(), CliError> {
    let cfg = load_config(config_path, ov)?;
    let dir = out_dir(&cfg);
    verify_manifest(&cfg, &dir)?;
    let log = cfg.load_data()?;
    let spec = cfg.split_spec();
    let result = split(&log, &spec).map_err(|e| CliError::Usage(e.to_string()))?;
    let pcfg = cfg.protocol_config();
    if checkpoint_arg.is_some() && cfg.eval.seeds.len() != 1 {
        return Err(CliError::Usage(
            "--checkpoint applies to a single seed; pass --seed as well".into(),
        ));
    }

    for &seed in &cfg.eval.seeds {
        let in_path = checkpoint_arg
            .map(Path::to_path_buf)
            .unwrap_or_else(|| model_ckpt_path(&dir, seed));
        let out_path = cometa_ckpt_path(&dir, seed);
        guard_overwrite(&out_path, force)?;

        let ckpt = checkpoint::load(&in_path)?;
        let expected = FeatureSchema::from_log(&log, pcfg.embed_dim);
        checkpoint::verify_schema(&ckpt, &expected)?;
        let backbone_before = ckpt.model.content_hash();

        let (seg, curves) = train_generators(&log, &result, &pcfg, &cfg.eval.kinds, &ckpt.model, seed)
            .map_err(CliError::from)?;
        assert_eq!(
            ckpt.model.content_hash(),
            backbone_before,
            "generator training must not touch the backbone"
        );
        println!("train-cometa[seed {seed}]: backbone hash unchanged ({backbone_before:016x})");

        checkpoint::save(&out_path, &ckpt.model, &seg)?;
        println!("train-cometa[seed {seed}]: checkpoint written to {}", out_path.display());

        // neighbor lists of the old items, for auditing the similarity side
        let mut base = result.pretrain.clone();
        base.extend_from_slice(&result.coldstart);
        let index = build_index(&base, true);
        let old_items: BTreeSet<u32> = result.old_items.iter().copied().collect();
        let mut lists = Vec::new();
        for &item in &result.old_items {
            if let Ok(list) = top_k_neighbors(&index, item, &old_items, pcfg.seg.k_neighbors) {
                lists.push(list);
            }
        }
        let npath = dir.join(format!("neighbors-seed{seed}.tsv"));
        fs::write(&npath, dump_neighbors(&lists)).map_err(|e| write_err(&npath, e))?;

        let cpath = dir.join(format!("episode_loss-seed{seed}.csv"));
        let mut csv = String::from("variant,epoch,loss_a,loss_b,loss_seg\n");
        for (slot, curve) in &curves {
            for e in curve {
                csv.push_str(&format!(
                    "{:?},{},{:.9},{:.9},{:.9}\n",
                    slot, e.epoch, e.loss_a, e.loss_b, e.loss_seg
                ));
            }
        }
        fs::write(&cpath, csv).map_err(|e| write_err(&cpath, e))?;
        println!(
            "train-cometa[seed {seed}]: wrote {} and {}",
            npath.display(),
            cpath.display()
        );
    }
    Ok(())
}

/// Runs the staged evaluation and writes report.md / report.json.
pub fn cmd_evaluate(
    config_path: &Path,
    ov: &Overrides,
    checkpoint_arg: Option<&Path>,
    force: bool,
) -> Result<(), CliError> {
    let cfg = load_config(config_path, ov)?;
    let dir = out_dir(&cfg);
    let log = cfg.load_data()?;
    let spec = cfg.split_spec();
    let pcfg = cfg.protocol_config();
    guard_overwrite(&dir.join("report.md"), force)?;
    guard_overwrite(&dir.join("report.json"), force)?;

    let outcome = if let Some(ckpt_path) = checkpoint_arg {
        if cfg.eval.seeds.len() != 1 {
            return Err(CliError::Usage(
                "--checkpoint resumes one seed; pass --seed to pick it".into(),
            ));
        }
        let seed = cfg.eval.seeds[0];
        let ckpt = checkpoint::load(ckpt_path)?;
        checkpoint::verify_schema(&ckpt, &FeatureSchema::from_log(&log, pcfg.embed_dim))?;
        let needs: Vec<InitializerKind> = cfg
            .eval
            .kinds
            .iter()
            .copied()
            .filter(|k| k.generator_slot().is_some_and(|s| ckpt.seg.get(s).is_none()))
            .collect();
        if !needs.is_empty() {
            return Err(CliError::Usage(format!(
                "checkpoint {} lacks trained generators for {:?}; run `cometa train-cometa` with those kinds",
                ckpt_path.display(),
                needs.iter().map(|k| k.name()).collect::<Vec<_>>()
            )));
        }
        let prepared = PreparedSeed {
            model: ckpt.model,
            seg: ckpt.seg,
            seg_curves: Vec::new(),
        };
        run_protocol_prepared(&log, &spec, &pcfg, &cfg.eval.kinds, seed, prepared)?
    } else {
        run_protocol(
            &log,
            &spec,
            &pcfg,
            &cfg.eval.kinds,
            &cfg.eval.seeds,
            cfg.eval.parallel_seeds,
        )?
    };

    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    let set = build_report(&outcome.reports, &outcome.warnings);
    let (md, json) = emit_report(&set, &dir)?;
    for m in &set.methods {
        let warm = m
            .mean
            .warm_a
            .map(|w| format!("warm_a auc {:.4} logloss {:.4}", w.auc, w.logloss))
            .unwrap_or_else(|| "cold only".to_string());
        println!(
            "evaluate: {} cold auc {:.4} logloss {:.4} | {}",
            m.method, m.mean.cold.auc, m.mean.cold.logloss, warm
        );
    }
    println!("evaluate: wrote {} and {}", md.display(), json.display());
    Ok(())
}

/// Rebuilds report.md from an existing report.json.
pub fn cmd_report(json_path: &Path, out: Option<&Path>, force: bool) -> Result<(), CliError> {
    let text = fs::read_to_string(json_path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", json_path.display())))?;
    let set: ReportSet = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("invalid report {}: {e}", json_path.display())))?;
    let md_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| json_path.with_extension("md"));
    guard_overwrite(&md_path, force)?;
    fs::write(&md_path, to_markdown(&set)).map_err(|e| write_err(&md_path, e))?;
    println!("report: wrote {}", md_path.display());
    Ok(())
}

/// End-to-end single-seed convenience used by tests and the C API: prepare
/// in memory, run the protocol, return the report set.
pub fn run_full(cfg: &RunConfig) -> Result<ReportSet, CliError> {
    let log = cfg.load_data()?;
    let spec = cfg.split_spec();
    let pcfg = cfg.protocol_config();
    let outcome = run_protocol(&log, &spec, &pcfg, &cfg.eval.kinds, &cfg.eval.seeds, cfg.eval.parallel_seeds)?;
    Ok(build_report(&outcome.reports, &outcome.warnings))
}
