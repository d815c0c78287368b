//! Command-line driver: dataset generation, training runs, evaluation of
//! prediction dumps, strategy comparison, and the weight-net ablation.
//!
//! Output layout under the output directory:
//!
//! ```text
//! dataset/                      generated dataset
//! runs/<strategy>/<seed>/       checkpoint, metrics.json, per_class.csv, predictions.jsonl
//! runs/ablation/<arch>/<seed>/  same, one directory per weight-net layout
//! reports/                      compare.{csv,json}, ablation.{csv,json}, eval outputs
//! ```

mod commands;
mod config;

pub use commands::{aggregate, cmd_ablate, cmd_compare, cmd_eval, cmd_gen, cmd_train, AggregateRow, Comparison, MetricStat};
pub use config::{
    default_architectures, derive_seed, load_experiment, load_gen_config, AblationSection, ClassifierSection,
    DatasetSource, EvalSection, ExperimentConfig, WeightNetSection,
};

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::Error;
use crate::trainer::{Strategy, TrainError};

/// Environment variable that overrides the configured seeds with one seed.
pub const SEED_ENV: &str = "METABALANCE_SEED";

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "metabalance", version, about = "Meta-learned loss weighting for long-tailed multi-label data")]
pub struct Cli {
    /// Suppress progress output.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory; overrides the config's output_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated seeds; overrides the config and the environment.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset into <out>/dataset.
    Gen {
        /// Generator config, or an experiment config with a generated dataset.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one strategy for every seed.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Weighting strategy; overrides the config.
        #[arg(long)]
        strategy: Option<Strategy>,
    },
    /// Compute recall reports from a prediction dump.
    Eval {
        /// Prediction dump (JSON Lines).
        predictions: PathBuf,
        /// Experiment config supplying K values and constraints.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate mean and standard deviation of mean recall across runs.
    Compare {
        /// Strategy run directories (each holding one directory per seed).
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train ml_mwn once per weight-net architecture and tabulate the results.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
    },
}

impl clap::ValueEnum for Strategy {
    fn value_variants<'a>() -> &'a [Self] {
        &Strategy::ALL
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.as_str()))
    }
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &TrainError) -> i32 {
    match err {
        TrainError::Diverged { .. } | TrainError::HypergradCheck { .. } => EXIT_NUMERIC,
        TrainError::Failed(e) if e.is_numeric() => EXIT_NUMERIC,
        TrainError::Failed(_) => EXIT_CONFIG,
    }
}

/// Parses `args` and runs the command. `env_seed` is the value of
/// [`SEED_ENV`], if set.
pub fn run<I, T>(args: I, env_seed: Option<String>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let env_seed = match env_seed.map(|s| s.trim().parse::<u64>()) {
        None => None,
        Some(Ok(s)) => Some(s),
        Some(Err(e)) => {
            eprintln!("error: {SEED_ENV}: {e}");
            return EXIT_CONFIG;
        }
    };
    match execute(&cli, env_seed) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: &Cli, env_seed: Option<u64>) -> Result<(), TrainError> {
    let quiet = cli.quiet;
    match &cli.command {
        Command::Gen { config, out } => cmd_gen(config, out.as_deref(), quiet).map(|_| ()).map_err(Into::into),
        Command::Train { run, strategy } => {
            let (cfg, out) = resolve(run, env_seed)?;
            cmd_train(&cfg, &out, *strategy, quiet).map(|_| ())
        }
        Command::Eval {
            predictions,
            config,
            out,
        } => {
            let cfg = config.as_deref().map(load_experiment).transpose()?;
            cmd_eval(predictions, cfg.as_ref(), out, quiet).map_err(Into::into)
        }
        Command::Compare { runs, out } => cmd_compare(runs, out, quiet).map(|_| ()).map_err(Into::into),
        Command::Ablate { run } => {
            let (cfg, out) = resolve(run, env_seed)?;
            cmd_ablate(&cfg, &out, quiet).map(|_| ())
        }
    }
}

fn resolve(args: &RunArgs, env_seed: Option<u64>) -> Result<(ExperimentConfig, PathBuf), Error> {
    let mut cfg = load_experiment(&args.config)?;
    if let Some(s) = env_seed {
        cfg.seeds = vec![s];
    }
    if let Some(s) = &args.seeds {
        cfg.seeds = s.clone();
    }
    cfg.validate()?;
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

/// Process entry point.
pub fn main() -> i32 {
    run(std::env::args_os(), std::env::var(SEED_ENV).ok())
}
