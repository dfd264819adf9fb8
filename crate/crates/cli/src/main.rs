mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

#[derive(Debug, Parser)]
#[command(name = "rlora", version, about = "Train, subtract, route and evaluate low-rank adapter libraries")]
pub struct Cli {
    /// Numeric precision for model and adapter arithmetic.
    #[arg(long, global = true, value_enum, default_value = "f32")]
    pub precision: PrecisionArg,

    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Directory that relative artifact paths are resolved against.
    #[arg(long, global = true, env = "RLORA_OUT", default_value = ".")]
    pub out_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the task experts, the general adapter and the shared adapter.
    TrainExperts {
        /// Pipeline configuration (TOML). Defaults to the shipped configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for the run.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Retrain and verify that the library on disk is reproduced exactly.
        #[arg(long, conflicts_with = "force")]
        check: bool,
        /// Overwrite an existing run.
        #[arg(long)]
        force: bool,
    },
    /// Subtract a general adapter from every expert of a library.
    Subtract {
        #[arg(long)]
        library: PathBuf,
        #[arg(long)]
        general: String,
        /// `delta` (exact, rank grows) or `param` (factor-wise, rank kept).
        #[arg(long, default_value = "delta")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the routing prototype bank of a library.
    Prototypes {
        #[arg(long)]
        library: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the per-token routing decisions for an input sequence.
    RouteInspect {
        #[arg(long)]
        library: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Token ids separated by spaces or commas.
        #[arg(long)]
        input: String,
        #[arg(long, default_value_t = 3)]
        k: usize,
    },
    /// Train and compare every method on the held-out tasks.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated subset of base, shared, mean_norm, arrow, genknowsub.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// Comma-separated contamination shares; writes a CSV instead of a report.
        #[arg(long, value_delimiter = ',')]
        sweep_gamma: Option<Vec<f64>>,
        /// Comma-separated seeds for the sweep.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long, default_value = "eval")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
