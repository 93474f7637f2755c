mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mp4sr::numkernel::Precision;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; exit code 2.
    Config(String),
    /// Missing files, bad data, diverged training; exit code 1.
    Runtime(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mp4sr", version, about = "Multimodal pre-training for sequential recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the training and synthesis sections.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Ablation variant to enable (repeatable).
    #[arg(long = "variant", value_name = "NAME")]
    pub variants: Vec<String>,
    /// Cold-start protocol: no ID embeddings, cold targets only.
    #[arg(long)]
    pub cold_start: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Valid,
    Test,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic interaction file and feature store.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// k-core filter an interaction file and write the split manifest.
    Preprocess {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Interaction file; defaults to `interactions` from the config.
        input: Option<PathBuf>,
    },
    /// Pre-train; `--init` resumes from a pre-training checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Pre-training checkpoint to resume
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Fine-tune from `--init` or from scratch, then test.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Checkpoint whose matching parameters initialize the model
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score a saved model.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Fine-tuned checkpoint to score
        #[arg(long)]
        init: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        mode: Mode,
    },
    /// Train and test every ablation variant.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Loss-trajectory CSV from fine-tuning logs written in diagnostic mode.
    Report {
        #[command(flatten)]
        common: Common,
        /// `RUN_ID=PATH`, or a bare path whose file stem becomes the run id.
        #[arg(required = true)]
        logs: Vec<String>,
    },
}

macro_rules! dispatch {
    ($p:expr, $m:ident :: $f:ident ( $($a:expr),* )) => {
        match $p {
            Precision::F32 => $m::$f::<f32>($($a),*),
            Precision::F64 => $m::$f::<f64>($($a),*),
        }
    };
}
fn run(cli: Cli) -> Result<(), CliError> {
    let precision = Precision::from_env();
    match cli.command {
        Command::Synth { common } => commands::synth(&common),
        Command::Preprocess { common, k, input } => commands::preprocess(&common, k, input),
        Command::Report { common, logs } => commands::report(&common, &logs),
        Command::Pretrain { common, init } => dispatch!(precision, commands::pretrain(&common, init.as_deref())),
        Command::Finetune { common, init } => dispatch!(precision, commands::finetune(&common, init.as_deref())),
        Command::Evaluate { common, init, mode } => dispatch!(precision, commands::evaluate(&common, &init, mode)),
        Command::Ablate { common } => dispatch!(precision, commands::ablate(&common)),
    }
}


fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
