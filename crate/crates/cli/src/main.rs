//! `gep`: generate data, train predictors, score, calibrate, predict and run
//! the benchmarks of `gep-core` from the command line.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "gep",
    version,
    about = "Generalization error predictors and their benchmarks"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Experiment config (JSON); defaults apply to omitted fields
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory; every artifact is written below it
    #[arg(long, global = true, value_name = "DIR", default_value = "gep-out")]
    out: PathBuf,
    /// Override the config's top-level seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print progress to stderr (repeat for more)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Worker threads for the benchmark runners
    #[arg(long, global = true, env = "GEP_BENCH_JOBS")]
    jobs: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DataFormat {
    Csv,
    Bin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Conf,
    Lms,
    Ma,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the source splits and target sets of seed 0
    Gen {
        /// File format of the written datasets
        #[arg(long, value_enum, default_value = "csv")]
        format: DataFormat,
        /// Skip the corrupted copies of the in-distribution target
        #[arg(long)]
        no_corruptions: bool,
    },
    /// Train a single model or an ensemble; writes ensemble.json
    Train {
        /// Training data (.csv or .gepb); defaults to the generated train split
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
        /// Number of classes; inferred from the labels when omitted
        #[arg(long)]
        classes: Option<usize>,
        /// Ensemble size
        #[arg(long, default_value_t = 1)]
        members: usize,
        /// Per-member label-noise rate
        #[arg(long, default_value_t = 0.0)]
        label_noise: f64,
    },
    /// Score samples; writes scores.csv and predictions.csv
    Score {
        #[arg(long, value_enum)]
        method: MethodArg,
        /// Trained ensemble from `train`
        #[arg(long, value_name = "FILE", conflicts_with = "logits", requires = "data")]
        models: Option<PathBuf>,
        /// Data to score (.csv or .gepb)
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
        #[arg(long)]
        classes: Option<usize>,
        /// Logits manifest of externally computed member outputs
        #[arg(long, value_name = "FILE", required_unless_present = "models")]
        logits: Option<PathBuf>,
    },
    /// Fit the score threshold on validation scores; writes threshold.json
    Calibrate {
        /// Validation scores CSV from `score`
        #[arg(long, value_name = "FILE")]
        scores: PathBuf,
        /// Validation accuracy of the deployed predictor
        #[arg(long, required_unless_present = "predictions")]
        accuracy: Option<f64>,
        /// Validation predictions CSV; accuracy is computed against --data
        #[arg(long, value_name = "FILE", conflicts_with = "accuracy", requires = "data")]
        predictions: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Predict target accuracy from target scores; writes estimate.json
    Predict {
        /// Target scores CSV from `score`
        #[arg(long, value_name = "FILE")]
        scores: PathBuf,
        /// threshold.json from `calibrate`
        #[arg(long, value_name = "FILE")]
        threshold: PathBuf,
        #[arg(long, default_value = "conf")]
        method: String,
        #[arg(long, default_value = "target")]
        target: String,
        /// Target predictions CSV; with --data, also reports the true accuracy
        #[arg(long, value_name = "FILE", requires = "data")]
        predictions: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Distribution-shift benchmark
    BenchShift,
    /// Training-data fidelity benchmark
    BenchFidelity,
    /// MA ensemble-size sweep
    SweepEnsemble {
        /// Ensemble sizes; defaults to the config's sweep_sizes
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
    /// Simplicity-bias stress test on slab data
    BenchSlab,
    /// Re-emit tables and figures from a saved report.json
    Report {
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error());
            ExitCode::from(e.code())
        }
    }
}
