//! Metrics and the staged cold/warm evaluation protocol.

mod metrics;
mod protocol;
mod report;

pub use metrics::{auc, logloss};
pub use protocol::{
    prepare_only, run_protocol, run_protocol_prepared, train_generators, GeneratorCurves, Phase,
    PhaseMetrics, PhaseReport, PreparedSeed, ProtocolConfig, ProtocolOutcome,
};
pub use report::{build_report, emit_report, to_json, to_markdown, MethodReport, ReportSet, SeedRow, REPORT_SCHEMA_VERSION};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric needs both classes present")]
    SingleClass,
    #[error("empty input")]
    Empty,
    #[error("scores and labels differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no initializer kinds requested")]
    NoKinds,
    #[error("no reports to emit")]
    NoReports,
    #[error("cannot write {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error(transparent)]
    Data(#[from] crate::dataio::DataError),
    #[error(transparent)]
    Rec(#[from] crate::recmodel::RecError),
    #[error(transparent)]
    Seg(#[from] crate::seg::SegError),
    #[error(transparent)]
    Cometa(#[from] crate::cometa::CometaError),
}
