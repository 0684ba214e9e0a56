mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use aeen::gzsl::Criterion;
use aeen::network::ErasePolarity;
use aeen::optim::LrMode;

#[derive(Parser, Debug)]
#[command(name = "aeen", version, about = "Attribute-embedding zero-shot learning on feature maps")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset with planted ground truth.
    Gen {
        /// SyntheticSpec JSON file.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoint.json and metrics.jsonl.
    Train {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        settings: SettingsArgs,
    },
    /// Conventional zero-shot accuracy on the unseen classes.
    Eval {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Generalized zero-shot sweep with seen-score rectification.
    Gzsl {
        #[command(flatten)]
        io: IoArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        criterion: Option<CriterionArg>,
    },
    /// Staged random hyperparameter search over lr_max, xi and gamma.
    Search {
        #[command(flatten)]
        io: IoArgs,
        #[command(flatten)]
        settings: SettingsArgs,
        /// Stages as configs:epochs pairs.
        #[arg(long, default_value = "100:1,10:10,1:30")]
        plan: String,
        /// Worker threads for trials within a stage.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Export attribute and average activation maps as PGM images.
    Maps {
        #[command(flatten)]
        io: IoArgs,
        /// Model whose branch weights produce the maps.
        #[arg(long, required_unless_present = "generating_weights")]
        checkpoint: Option<PathBuf>,
        /// Use the planted weights from a ground_truth.json instead of a model.
        #[arg(long, conflicts_with = "checkpoint")]
        generating_weights: Option<PathBuf>,
        /// Dataset sample index.
        #[arg(long)]
        sample: usize,
        /// Attribute dimension to export (repeatable).
        #[arg(long)]
        attr: Vec<usize>,
        /// Also export the softmax-weighted average map of the sample's class.
        #[arg(long)]
        avg: bool,
        #[arg(long, value_enum, default_value_t = BranchArg::Bottom)]
        branch: BranchArg,
        /// Resize maps to this many pixels per side.
        #[arg(long)]
        upsample: Option<usize>,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct IoArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory or its dataset.json manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
struct SettingsArgs {
    /// Score against high-order augmented attributes.
    #[arg(long)]
    hoa: bool,
    /// Rescale projection rows to unit length.
    #[arg(long)]
    normalize_projection: bool,
    #[arg(long)]
    lr_max: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    lr_mode: Option<LrModeArg>,
    #[arg(long)]
    cycle_len: Option<f64>,
    #[arg(long)]
    cycle_mul: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long, value_enum)]
    polarity: Option<PolarityArg>,
    /// Accept lr_max, xi and gamma outside their usual ranges.
    #[arg(long)]
    allow_out_of_range: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum LrModeArg {
    Cycling,
    Constant,
    Step,
}

impl From<LrModeArg> for LrMode {
    fn from(m: LrModeArg) -> Self {
        match m {
            LrModeArg::Cycling => LrMode::Cycling,
            LrModeArg::Constant => LrMode::Constant,
            LrModeArg::Step => LrMode::Step,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum PolarityArg {
    BelowThreshold,
    AboveThreshold,
}

impl From<PolarityArg> for ErasePolarity {
    fn from(p: PolarityArg) -> Self {
        match p {
            PolarityArg::BelowThreshold => ErasePolarity::BelowThreshold,
            PolarityArg::AboveThreshold => ErasePolarity::AboveThreshold,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum CriterionArg {
    MaxH,
    Equalize,
}

impl From<CriterionArg> for Criterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::MaxH => Criterion::MaxH,
            CriterionArg::Equalize => Criterion::Equalize,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum BranchArg {
    Top,
    Bottom,
}

/// Usage errors exit with 2, everything else with 1.
#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().format_timestamp(None).init();

    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
