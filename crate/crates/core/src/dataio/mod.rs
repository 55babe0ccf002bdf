//! Data ingestion, label binarization, the old/new item split with warm
//! folds, and a synthetic generator with planted collaborative structure.

mod csvload;
mod movielens;
mod split;
mod synth;

pub use csvload::{load_csv, ColumnRole, CsvColumn, CsvSchema};
pub use movielens::load_movielens;
pub use split::{split, SplitManifest, SplitResult, SplitSpec, WarmFold};
pub use synth::{synthesize, synthesize_with_truth, SynthConfig, SynthTruth};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: malformed line: {detail}")]
    Malformed {
        file: String,
        line: usize,
        detail: String,
    },
    #[error("duplicate column '{0}' in header")]
    DuplicateColumn(String),
    #[error("column '{0}' not found in header")]
    UnknownColumn(String),
    #[error("{file}:{line}: label '{value}' is not binary")]
    NonBinaryLabel {
        file: String,
        line: usize,
        value: String,
    },
    #[error("schema needs exactly one {0} column")]
    SchemaArity(&'static str),
    #[error("interaction log is empty")]
    EmptyLog,
    #[error("split produced no old items (threshold {0})")]
    NoOldItems(usize),
    #[error("split produced no new items (window {0}..{1})")]
    NoNewItems(usize, usize),
    #[error("invalid split spec: {0}")]
    InvalidSpec(String),
    #[error("invalid synthetic config: {0}")]
    InvalidSynth(String),
}

/// One timestamped interaction with a binary label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub user: u32,
    pub item: u32,
    pub label: u8,
    pub ts: i64,
}

/// A categorical feature field and its vocabulary size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDef {
    pub name: String,
    pub vocab: usize,
}

/// Interactions plus per-entity attribute features, dictionary-encoded to
/// dense ids. The raw substrate for everything downstream.
#[derive(Debug, Clone)]
pub struct InteractionLog {
    pub num_users: usize,
    pub num_items: usize,
    pub user_fields: Vec<FieldDef>,
    pub item_fields: Vec<FieldDef>,
    /// user id → field → encoded values (multi-valued fields keep them all)
    pub user_attrs: Vec<Vec<Vec<u32>>>,
    /// item id → field → encoded values
    pub item_attrs: Vec<Vec<Vec<u32>>>,
    pub records: Vec<Record>,
    /// original identifiers, for audit and decoding
    pub user_keys: Vec<String>,
    pub item_keys: Vec<String>,
}

impl InteractionLog {
    /// Checks the structural invariants: ids in range, attribute rows
    /// complete, attribute values inside their vocabularies.
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |detail: String| DataError::Malformed {
            file: "<log>".into(),
            line: 0,
            detail,
        };
        if self.user_attrs.len() != self.num_users || self.item_attrs.len() != self.num_items {
            return Err(fail("attribute tables do not cover all ids".into()));
        }
        for r in &self.records {
            if r.user as usize >= self.num_users {
                return Err(fail(format!("user {} out of range", r.user)));
            }
            if r.item as usize >= self.num_items {
                return Err(fail(format!("item {} out of range", r.item)));
            }
            if r.label > 1 {
                return Err(fail(format!("label {} is not binary", r.label)));
            }
        }
        for (attrs, fields, kind) in [
            (&self.user_attrs, &self.user_fields, "user"),
            (&self.item_attrs, &self.item_fields, "item"),
        ] {
            for (id, row) in attrs.iter().enumerate() {
                if row.len() != fields.len() {
                    return Err(fail(format!("{kind} {id} has {} of {} fields", row.len(), fields.len())));
                }
                for (f, vals) in row.iter().enumerate() {
                    if vals.iter().any(|&v| v as usize >= fields[f].vocab) {
                        return Err(fail(format!("{kind} {id} field {} value out of vocabulary", fields[f].name)));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Shared dictionary encoder: values get dense codes in first-seen order.
#[derive(Debug, Default, Clone)]
pub(crate) struct Dictionary {
    codes: std::collections::HashMap<String, u32>,
    keys: Vec<String>,
}

impl Dictionary {
    pub fn encode(&mut self, value: &str) -> u32 {
        if let Some(&c) = self.codes.get(value) {
            return c;
        }
        let c = self.keys.len() as u32;
        self.codes.insert(value.to_string(), c);
        self.keys.push(value.to_string());
        c
    }

    pub fn get(&self, value: &str) -> Option<u32> {
        self.codes.get(value).copied()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn into_keys(self) -> Vec<String> {
        self.keys
    }
}
