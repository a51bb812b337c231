mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tendency_core::model::Variant;

#[derive(Parser)]
#[command(name = "tendency", version, about = "Annotator-tendency experiments: generate, train, evaluate, ablate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ConfigArgs {
    /// Flat key = value config file (a run manifest also works).
    #[arg(long)]
    pub config: PathBuf,
    /// Override one config key, e.g. --set maxEpochs=5.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitPart {
    All,
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Mode {
    Restricted,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and print its consistency matrix.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one variant on the train/val splits of a dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path; history, report and manifest are written beside it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Score a checkpoint or a prediction CSV against a dataset.
    Eval {
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        model: Option<PathBuf>,
        /// CSV of predicted labels, one row per sample and one column per annotator.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Needed to select a split other than `all`.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitPart,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Train and score every configured variant over every seed.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sparse-annotation sweep over removal rates.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated rates; defaults to the config's sparsityRates.
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
    },
    /// Dump attention CSVs and heatmaps, plus fidelity when profiles exist.
    Attn {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        limit: usize,
    },
    /// Parameter count and mean per-sample inference time.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate { cfg, out } => commands::generate(&cfg, &out),
        Command::Train { cfg, data, out, variant } => commands::train(&cfg, &data, &out, variant),
        Command::Eval { model, predictions, data, out, config, overrides, split, mode } => commands::eval(commands::EvalArgs {
            model,
            predictions,
            data,
            out,
            config,
            overrides,
            split,
            mode,
        }),
        Command::Ablate { cfg, out } => commands::ablate(&cfg, &out),
        Command::Sweep { cfg, out, rates } => commands::sweep(&cfg, &out, rates),
        Command::Attn { model, data, out, limit } => commands::attn(&model, &data, &out, limit),
        Command::Bench { model, data, repetitions, out } => commands::bench(&model, &data, repetitions, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
