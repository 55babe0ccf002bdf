//! Report files: a Markdown table (method × phase × metric, means plus
//! per-seed sections) and a machine-readable JSON document. Output bytes
//! are a pure function of the reports, so identical runs produce identical
//! files; wall-clock telemetry never enters them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::protocol::{Phase, PhaseMetrics, PhaseReport};
use super::EvalError;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub cold: PhaseMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warm_a: Option<PhaseMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warm_b: Option<PhaseMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warm_c: Option<PhaseMetrics>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub mean: SeedRow,
    pub per_seed: Vec<SeedRow>,
}

/// The complete evaluation outcome of one `evaluate` invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSet {
    pub schema_version: u32,
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodReport>,
    pub warnings: Vec<String>,
}

fn mean_metrics(ms: &[PhaseMetrics]) -> PhaseMetrics {
    let n = ms.len() as f64;
    PhaseMetrics {
        auc: ms.iter().map(|m| m.auc).sum::<f64>() / n,
        logloss: ms.iter().map(|m| m.logloss).sum::<f64>() / n,
    }
}

fn mean_phase(rows: &[&PhaseReport], phase: Phase) -> Option<PhaseMetrics> {
    let vals: Vec<PhaseMetrics> = rows.iter().filter_map(|r| r.phase(phase)).collect();
    (vals.len() == rows.len() && !vals.is_empty()).then(|| mean_metrics(&vals))
}

/// Groups raw per-(method, seed) reports by method, preserving the method
/// order of first appearance; seeds are sorted.
pub fn build_report(reports: &[PhaseReport], warnings: &[String]) -> ReportSet {
    let mut methods: Vec<String> = Vec::new();
    for r in reports {
        let name = r.method.name().to_string();
        if !methods.contains(&name) {
            methods.push(name);
        }
    }
    let mut seeds: Vec<u64> = reports.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();

    let method_reports = methods
        .iter()
        .map(|name| {
            let mut rows: Vec<&PhaseReport> = reports.iter().filter(|r| r.method.name() == *name).collect();
            rows.sort_by_key(|r| r.seed);
            let per_seed: Vec<SeedRow> = rows
                .iter()
                .map(|r| SeedRow {
                    seed: r.seed,
                    cold: r.cold,
                    warm_a: r.warm_a,
                    warm_b: r.warm_b,
                    warm_c: r.warm_c,
                })
                .collect();
            let mean = SeedRow {
                seed: 0,
                cold: mean_phase(&rows, Phase::Cold).expect("cold phase always present"),
                warm_a: mean_phase(&rows, Phase::WarmA),
                warm_b: mean_phase(&rows, Phase::WarmB),
                warm_c: mean_phase(&rows, Phase::WarmC),
            };
            MethodReport {
                method: name.clone(),
                mean,
                per_seed,
            }
        })
        .collect();

    ReportSet {
        schema_version: REPORT_SCHEMA_VERSION,
        seeds,
        methods: method_reports,
        warnings: warnings.to_vec(),
    }
}

fn cell(m: Option<PhaseMetrics>) -> String {
    match m {
        Some(m) => format!("{:.4} | {:.4}", m.auc, m.logloss),
        None => "- | -".to_string(),
    }
}

fn table(rows: &[(String, SeedRow)]) -> String {
    let mut out = String::new();
    out.push_str("| Method | Cold AUC | Cold Logloss | Warm-a AUC | Warm-a Logloss | Warm-b AUC | Warm-b Logloss | Warm-c AUC | Warm-c Logloss |\n");
    out.push_str("|---|---|---|---|---|---|---|---|---|\n");
    for (name, row) in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            name,
            cell(Some(row.cold)),
            cell(row.warm_a),
            cell(row.warm_b),
            cell(row.warm_c),
        ));
    }
    out
}

pub fn to_markdown(set: &ReportSet) -> String {
    let mut out = String::new();
    out.push_str("# Evaluation report\n\n");
    out.push_str(&format!(
        "schema_version: {} | seeds: {:?}\n\n",
        set.schema_version, set.seeds
    ));
    out.push_str("## Mean over seeds\n\n");
    let mean_rows: Vec<(String, SeedRow)> = set
        .methods
        .iter()
        .map(|m| (m.method.clone(), m.mean.clone()))
        .collect();
    out.push_str(&table(&mean_rows));
    out.push_str("\n## Per seed\n");
    for seed in &set.seeds {
        out.push_str(&format!("\n### seed {seed}\n\n"));
        let rows: Vec<(String, SeedRow)> = set
            .methods
            .iter()
            .filter_map(|m| {
                m.per_seed
                    .iter()
                    .find(|r| r.seed == *seed)
                    .map(|r| (m.method.clone(), r.clone()))
            })
            .collect();
        out.push_str(&table(&rows));
    }
    if !set.warnings.is_empty() {
        out.push_str("\n## Warnings\n\n");
        for w in &set.warnings {
            out.push_str(&format!("- {w}\n"));
        }
    }
    out
}

pub fn to_json(set: &ReportSet) -> String {
    let mut s = serde_json::to_string_pretty(set).expect("report serializes");
    s.push('\n');
    s
}

/// Writes `report.md` and `report.json` into `dir`.
pub fn emit_report(set: &ReportSet, dir: &Path) -> Result<(PathBuf, PathBuf), EvalError> {
    if set.methods.is_empty() {
        return Err(EvalError::NoReports);
    }
    fs::create_dir_all(dir).map_err(|e| EvalError::Io(dir.display().to_string(), e))?;
    let md_path = dir.join("report.md");
    let json_path = dir.join("report.json");
    fs::write(&md_path, to_markdown(set)).map_err(|e| EvalError::Io(md_path.display().to_string(), e))?;
    fs::write(&json_path, to_json(set)).map_err(|e| EvalError::Io(json_path.display().to_string(), e))?;
    Ok((md_path, json_path))
}
