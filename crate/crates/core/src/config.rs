//! The run configuration document (JSON) and its override mechanics.
//!
//! Defaults follow the reference setup: embedding size 16 per feature,
//! a 64-64-64 MLP, Adam at learning rate 0.001, blend weight 0.1. Values
//! from a config file override the defaults; command-line flags override
//! the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cometa::InitializerKind;
use crate::dataio::{load_csv, load_movielens, synthesize, CsvSchema, DataError, InteractionLog, SplitSpec, SynthConfig};
use crate::evalharness::ProtocolConfig;
use crate::recmodel::TrainSettings;
use crate::seg::SegTrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {path}: {detail}")]
    Parse { path: String, detail: String },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Where interactions come from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    Movielens {
        ratings: PathBuf,
        users: PathBuf,
        movies: PathBuf,
    },
    Csv {
        path: PathBuf,
        schema: CsvSchema,
    },
    Synthetic {
        #[serde(default)]
        params: SynthConfig,
        #[serde(default = "default_data_seed")]
        seed: u64,
    },
}

fn default_data_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden: vec![64, 64, 64],
            lr: 0.001,
            batch_size: 256,
            pretrain_epochs: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SegConfig {
    pub eta: f64,
    pub beta: f64,
    pub m: usize,
    pub epochs: usize,
    pub lr: f64,
    pub k_neighbors: usize,
    pub gen_hidden: Vec<usize>,
    pub first_order: bool,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            eta: 0.001,
            beta: 0.1,
            m: 20,
            epochs: 10,
            lr: 0.001,
            k_neighbors: 8,
            gen_hidden: vec![64, 64],
            first_order: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitConfig {
    pub n_old: usize,
    pub n_new: usize,
    pub k_fold: usize,
    /// defaults to 2·m (two episode minibatches per old item)
    #[serde(default)]
    pub coldstart_holdout: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            n_old: 200,
            n_new: 80,
            k_fold: 20,
            coldstart_holdout: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub kinds: Vec<InitializerKind>,
    pub seeds: Vec<u64>,
    pub warm_epochs: usize,
    pub warm_lr: f64,
    pub parallel_seeds: usize,
    pub cold_only: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            kinds: vec![InitializerKind::Cometa, InitializerKind::Random],
            seeds: vec![1, 2, 3, 4, 5],
            warm_epochs: 1,
            warm_lr: 0.001,
            parallel_seeds: 1,
            cold_only: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub seg: SegConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    pub fn load_data(&self) -> Result<InteractionLog, ConfigError> {
        Ok(match &self.data {
            DataConfig::Movielens { ratings, users, movies } => load_movielens(ratings, users, movies)?,
            DataConfig::Csv { path, schema } => load_csv(path, schema)?,
            DataConfig::Synthetic { params, seed } => synthesize(params, *seed)?,
        })
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            n_old: self.split.n_old,
            n_new: self.split.n_new,
            k_fold: self.split.k_fold,
            coldstart_holdout: self.split.coldstart_holdout.unwrap_or(2 * self.seg.m),
        }
    }

    pub fn protocol_config(&self) -> ProtocolConfig {
        ProtocolConfig {
            embed_dim: self.model.embed_dim,
            hidden: self.model.hidden.clone(),
            pretrain: TrainSettings {
                epochs: self.model.pretrain_epochs,
                lr: self.model.lr,
                batch_size: self.model.batch_size,
            },
            seg: SegTrainConfig {
                eta: self.seg.eta,
                beta: self.seg.beta,
                m: self.seg.m,
                epochs: self.seg.epochs,
                lr: self.seg.lr,
                first_order: self.seg.first_order,
                k_neighbors: self.seg.k_neighbors,
                gen_hidden: self.seg.gen_hidden.clone(),
                ..SegTrainConfig::default()
            },
            warm_epochs: self.eval.warm_epochs,
            warm_lr: self.eval.warm_lr,
            eval_batch: 512,
            cold_only: self.eval.cold_only,
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub kinds: Option<Vec<InitializerKind>>,
    pub cold_only: Option<bool>,
    pub parallel_seeds: Option<usize>,
}

impl RunConfig {
    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(seed) = ov.seed {
            self.eval.seeds = vec![seed];
        }
        if let Some(out) = &ov.out {
            self.out_dir = Some(out.clone());
        }
        if let Some(kinds) = &ov.kinds {
            self.eval.kinds = kinds.clone();
        }
        if let Some(c) = ov.cold_only {
            self.eval.cold_only = c;
        }
        if let Some(p) = ov.parallel_seeds {
            self.eval.parallel_seeds = p;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn file_config() -> RunConfig {
        serde_json::from_str(
            r#"{
                "data": {"source": "synthetic", "params": {"users": 100}},
                "split": {"n_old": 50, "n_new": 30, "k_fold": 10},
                "model": {"embed_dim": 8},
                "eval": {"seeds": [7, 8], "kinds": ["random"], "parallel_seeds": 2}
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn defaults_match_the_reference_setup() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"data": {"source": "synthetic"}}"#).unwrap();
        assert_eq!(cfg.model.embed_dim, 16);
        assert_eq!(cfg.model.hidden, vec![64, 64, 64]);
        assert_eq!(cfg.model.lr, 0.001);
        assert_eq!(cfg.seg.beta, 0.1);
        assert_eq!(cfg.seg.eta, 0.001);
        assert_eq!(cfg.split.n_old, 200);
        assert_eq!(cfg.split.n_new, 80);
        assert_eq!(cfg.split.k_fold, 20);
        assert_eq!(cfg.eval.warm_epochs, 1);
        // holdout defaults to two episode minibatches
        assert_eq!(cfg.split_spec().coldstart_holdout, 40);
    }

    #[test]
    fn file_values_override_defaults_per_field() {
        let cfg = file_config();
        assert_eq!(cfg.model.embed_dim, 8);
        // untouched fields keep defaults
        assert_eq!(cfg.model.hidden, vec![64, 64, 64]);
        assert_eq!(cfg.split.n_old, 50);
        assert_eq!(cfg.eval.seeds, vec![7, 8]);
        assert_eq!(cfg.eval.kinds, vec![InitializerKind::Random]);
        assert_eq!(cfg.eval.parallel_seeds, 2);
        assert_eq!(cfg.eval.warm_lr, 0.001);
    }

    #[test]
    fn flags_override_file_values_per_field() {
        let mut cfg = file_config();
        cfg.apply(&Overrides {
            seed: Some(42),
            out: Some(PathBuf::from("/tmp/x")),
            kinds: Some(vec![InitializerKind::Cometa]),
            cold_only: Some(true),
            parallel_seeds: Some(4),
        });
        assert_eq!(cfg.eval.seeds, vec![42]);
        assert_eq!(cfg.out_dir, Some(PathBuf::from("/tmp/x")));
        assert_eq!(cfg.eval.kinds, vec![InitializerKind::Cometa]);
        assert!(cfg.eval.cold_only);
        assert_eq!(cfg.eval.parallel_seeds, 4);
        // empty overrides change nothing
        let before = serde_json::to_string(&cfg).unwrap();
        cfg.apply(&Overrides::default());
        assert_eq!(serde_json::to_string(&cfg).unwrap(), before);
    }

    #[test]
    fn unknown_source_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.json");
        fs::write(&p, r#"{"data": {"source": "sqlite"}}"#).unwrap();
        assert!(matches!(RunConfig::load(&p), Err(ConfigError::Parse { .. })));
    }

    #[test]
    fn synthetic_data_loads_seeded() {
        let cfg: RunConfig = serde_json::from_str(
            r#"{"data": {"source": "synthetic", "params": {"users": 50, "old_items": 5, "new_items": 2,
                "old_count_min": 10, "old_count_max": 12, "new_count_min": 4, "new_count_max": 5}, "seed": 9}}"#,
        )
        .unwrap();
        let a = cfg.load_data().unwrap();
        let b = cfg.load_data().unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.num_users, 50);
    }
}
