//! Pipeline driver: prepare → pretrain → train-cometa → evaluate → report.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cometa_core::cli::{self, CliError};
use cometa_core::cometa::InitializerKind;
use cometa_core::config::Overrides;

#[derive(Parser)]
#[command(
    name = "cometa",
    version,
    about = "Cold-start item embedding initialization: data splits, backbone pre-training, embedding generators and the cold/warm evaluation protocol"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// run configuration document (JSON)
    #[arg(long)]
    config: PathBuf,
    /// output directory (overrides the config's out_dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// restrict to a single seed (overrides the config's seed list)
    #[arg(long)]
    seed: Option<u64>,
    /// overwrite existing artifacts
    #[arg(long)]
    force: bool,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            ..Overrides::default()
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    /// cold evaluation only
    Cold,
    /// the full cold + warm-a/b/c protocol
    All,
}

#[derive(Subcommand)]
enum Cmd {
    /// Load the data, compute the old/new split and write the manifest
    Prepare {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train the backbone on old-item interactions
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Train the embedding generators against a frozen checkpoint
    TrainCometa {
        #[command(flatten)]
        common: Common,
        /// backbone checkpoint to start from (defaults to the pretrain output)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// initializer kinds to prepare generators for (comma separated)
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<InitializerKind>>,
    },
    /// Run the staged evaluation and write report files
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// resume from a train-cometa checkpoint instead of retraining
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// initializer kinds to evaluate (comma separated)
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<InitializerKind>>,
        /// which phases to run
        #[arg(long, value_enum)]
        phase: Option<PhaseArg>,
        /// run this many seeds concurrently
        #[arg(long)]
        parallel_seeds: Option<usize>,
    },
    /// Rebuild report.md from an existing report.json
    Report {
        /// path to report.json
        #[arg(long)]
        json: PathBuf,
        /// markdown output path (defaults next to the json)
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::Prepare { common } => cli::cmd_prepare(&common.config, &common.overrides(), common.force),
        Cmd::Pretrain { common } => cli::cmd_pretrain(&common.config, &common.overrides(), common.force),
        Cmd::TrainCometa { common, checkpoint, kinds } => {
            let mut ov = common.overrides();
            ov.kinds = kinds;
            cli::cmd_train_cometa(&common.config, &ov, checkpoint.as_deref(), common.force)
        }
        Cmd::Evaluate {
            common,
            checkpoint,
            kinds,
            phase,
            parallel_seeds,
        } => {
            let mut ov = common.overrides();
            ov.kinds = kinds;
            ov.cold_only = phase.map(|p| matches!(p, PhaseArg::Cold));
            ov.parallel_seeds = parallel_seeds;
            cli::cmd_evaluate(&common.config, &ov, checkpoint.as_deref(), common.force)
        }
        Cmd::Report { json, out, force } => cli::cmd_report(&json, out.as_deref(), force),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
