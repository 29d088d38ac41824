//! `prism-vq`: every stage of a run as a separate command, each leaving CSV
//! outputs and a JSON manifest with input and output digests.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use prism_core::Error;

#[derive(Parser, Debug)]
#[command(name = "prism-vq", version, about = "Vector-quantized factor model runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat `key = value` config file applied over the built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Comma-separated seeds; overrides the `seeds` key.
    #[arg(long)]
    pub seed: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-market routing hyperparameters.
    #[arg(long, value_enum)]
    pub market: Option<Market>,
    /// `key=value` override, applied after the config file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum Market {
    CsiStyle,
    SpStyle,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum SweepMode {
    Costs,
    Ndrop,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum Analysis {
    Codes,
    Exposures,
    Experts,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic panel and its ground truth.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one stage for every seed.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Directory with features.csv, prices.csv and priors.csv.
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a split with every seed's stage-2 checkpoint.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Average per-seed scores.
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Daily rank IC and summary metrics.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the ensembled test predictions in the output directory.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// TopK-DropN backtest.
    Backtest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Backtests across cost regimes or rebalance rates.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: SweepMode,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Code dynamics, factor exposures or expert activation.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        what: Analysis,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to the first seed's test predictions.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Ground-truth file; adds cluster purity to the code analysis.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

fn init_threads() -> prism_core::Result<()> {
    let Ok(v) = std::env::var("PRISM_VQ_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("PRISM_VQ_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> prism_core::Result<()> {
    init_threads()?;
    use commands as c;
    match cli.command {
        Command::GenData { common } => c::gen_data(&common),
        Command::Train { common, stage, data } => c::train(&common, stage, &data),
        Command::Predict { common, data, split } => c::predict(&common, &data, split),
        Command::Ensemble { common, split } => c::ensemble(&common, split),
        Command::Evaluate { common, data, predictions } => c::evaluate(&common, &data, predictions),
        Command::Backtest { common, data, predictions } => c::backtest(&common, &data, predictions),
        Command::Sweep { common, mode, data, predictions } => c::sweep(&common, mode, &data, predictions),
        Command::Analyze {
            common,
            what,
            data,
            predictions,
            truth,
        } => c::analyze(&common, what, &data, predictions, truth),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(if matches!(e, Error::Usage(_)) { 2 } else { 1 })
        }
    }
}
