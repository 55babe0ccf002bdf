//! Generic CSV ingestion driven by a column-role descriptor.
//!
//! Plain comma separation, header row required, no quoting. Multi-valued
//! attribute cells use `|` between values. Categorical values are
//! dictionary-encoded in first-seen order, so re-loading the same file
//! yields identical codes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Dictionary, FieldDef, InteractionLog, Record};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRole {
    UserId,
    ItemId,
    Label,
    Timestamp,
    UserAttr,
    ItemAttr,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvColumn {
    pub name: String,
    pub role: ColumnRole,
}

/// Column roles for [`load_csv`]. Exactly one user id, item id and label
/// column; the timestamp column is optional (row order is used without it).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub columns: Vec<CsvColumn>,
}

impl CsvSchema {
    fn one(&self, role: ColumnRole, tag: &'static str) -> Result<&str, DataError> {
        let mut found = None;
        for c in &self.columns {
            if c.role == role {
                if found.is_some() {
                    return Err(DataError::SchemaArity(tag));
                }
                found = Some(c.name.as_str());
            }
        }
        found.ok_or(DataError::SchemaArity(tag))
    }

    fn optional(&self, role: ColumnRole) -> Option<&str> {
        self.columns.iter().find(|c| c.role == role).map(|c| c.name.as_str())
    }

    fn all(&self, role: ColumnRole) -> Vec<&str> {
        self.columns
            .iter()
            .filter(|c| c.role == role)
            .map(|c| c.name.as_str())
            .collect()
    }
}

struct EntitySide {
    dict: Dictionary,
    attr_dicts: Vec<Dictionary>,
    attrs: Vec<Vec<Vec<u32>>>,
}

impl EntitySide {
    fn new(n_fields: usize) -> Self {
        Self {
            dict: Dictionary::default(),
            attr_dicts: (0..n_fields).map(|_| Dictionary::default()).collect(),
            attrs: Vec::new(),
        }
    }

    /// Encode the id; first sighting also records the attribute values.
    fn observe(&mut self, key: &str, attr_cells: &[&str]) -> u32 {
        if let Some(code) = self.dict.get(key) {
            return code;
        }
        let code = self.dict.encode(key);
        let mut row = Vec::with_capacity(attr_cells.len());
        for (f, cell) in attr_cells.iter().enumerate() {
            let mut vals: Vec<u32> = cell
                .split('|')
                .filter(|v| !v.is_empty())
                .map(|v| self.attr_dicts[f].encode(v))
                .collect();
            if vals.is_empty() {
                vals.push(self.attr_dicts[f].encode(""));
            }
            row.push(vals);
        }
        self.attrs.push(row);
        code
    }
}

pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<InteractionLog, DataError> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: file.clone(),
        source,
    })?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(DataError::EmptyLog)?;
    let header: Vec<&str> = header.split(',').map(|h| h.trim()).collect();
    for (i, h) in header.iter().enumerate() {
        if header[..i].contains(h) {
            return Err(DataError::DuplicateColumn(h.to_string()));
        }
    }
    let col = |name: &str| -> Result<usize, DataError> {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| DataError::UnknownColumn(name.to_string()))
    };

    let user_col = col(schema.one(ColumnRole::UserId, "user_id")?)?;
    let item_col = col(schema.one(ColumnRole::ItemId, "item_id")?)?;
    let label_col = col(schema.one(ColumnRole::Label, "label")?)?;
    let ts_col = match schema.optional(ColumnRole::Timestamp) {
        Some(name) => Some(col(name)?),
        None => None,
    };
    let user_attr_names = schema.all(ColumnRole::UserAttr);
    let item_attr_names = schema.all(ColumnRole::ItemAttr);
    let user_attr_cols = user_attr_names.iter().map(|n| col(n)).collect::<Result<Vec<_>, _>>()?;
    let item_attr_cols = item_attr_names.iter().map(|n| col(n)).collect::<Result<Vec<_>, _>>()?;

    let mut users = EntitySide::new(user_attr_cols.len());
    let mut items = EntitySide::new(item_attr_cols.len());
    let mut records = Vec::new();

    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(|c| c.trim()).collect();
        if cells.len() != header.len() {
            return Err(DataError::Malformed {
                file: file.clone(),
                line: lineno + 1,
                detail: format!("expected {} cells, got {}", header.len(), cells.len()),
            });
        }
        let label = match cells[label_col] {
            "0" | "0.0" => 0u8,
            "1" | "1.0" => 1u8,
            other => {
                return Err(DataError::NonBinaryLabel {
                    file: file.clone(),
                    line: lineno + 1,
                    value: other.to_string(),
                })
            }
        };
        let ts = match ts_col {
            Some(c) => cells[c].parse::<i64>().map_err(|_| DataError::Malformed {
                file: file.clone(),
                line: lineno + 1,
                detail: format!("bad timestamp '{}'", cells[c]),
            })?,
            None => lineno as i64,
        };
        let ucells: Vec<&str> = user_attr_cols.iter().map(|&c| cells[c]).collect();
        let icells: Vec<&str> = item_attr_cols.iter().map(|&c| cells[c]).collect();
        let user = users.observe(cells[user_col], &ucells);
        let item = items.observe(cells[item_col], &icells);
        records.push(Record { user, item, label, ts });
    }

    let field_defs = |names: &[&str], side: &EntitySide| -> Vec<FieldDef> {
        names
            .iter()
            .zip(&side.attr_dicts)
            .map(|(n, d)| FieldDef {
                name: n.to_string(),
                vocab: d.len().max(1),
            })
            .collect()
    };
    let user_fields = field_defs(&user_attr_names, &users);
    let item_fields = field_defs(&item_attr_names, &items);

    let log = InteractionLog {
        num_users: users.dict.len(),
        num_items: items.dict.len(),
        user_fields,
        item_fields,
        user_attrs: users.attrs,
        item_attrs: items.attrs,
        records,
        user_keys: users.dict.into_keys(),
        item_keys: items.dict.into_keys(),
    };
    log.validate()?;
    Ok(log)
}
