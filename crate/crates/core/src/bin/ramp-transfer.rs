use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ramp_transfer::pipeline::{self, Error, RunConfig};
use ramp_transfer::ridge::Thresholds;

#[derive(Parser)]
#[command(name = "ramp-transfer", version, about = "Predict post-metering freeway traffic by instance transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Raw loop and probe CSVs to 15-minute samples
    Ingest,
    /// Samples to time-of-week profiles
    Correct,
    /// Profiles to before/after feature rows
    Pair,
    /// Ridge coefficients and variable selection
    Ridge,
    /// Fit transfer models for one section
    Train,
    /// Predict the section's after-period values
    Predict,
    /// Leave-one-section-out evaluation
    Evaluate,
    /// Hyperparameter grid search
    GridSearch,
    /// Generate a synthetic corpus under <out>/data
    Synth,
    /// Metric tables and plot data from the evaluation
    Report,
    /// Every stage from ingest to report
    Pipeline,
}

#[derive(Args)]
struct Flags {
    /// JSON run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Maximum grid points, sampled with the seed
    #[arg(long, global = true)]
    budget: Option<usize>,
    /// Evaluation repeats with seeds seed, seed+1, ...
    #[arg(long, global = true)]
    runs: Option<usize>,
    /// Substitute similarity threshold
    #[arg(long, global = true)]
    theta: Option<f64>,
    /// Two-stage weight steps
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Cross-validation folds for step selection
    #[arg(long, global = true)]
    folds: Option<usize>,
    #[arg(long, global = true)]
    max_depth: Option<usize>,
    #[arg(long, global = true)]
    n_estimators: Option<usize>,
    /// Comma-separated ridge penalties
    #[arg(long, global = true, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    /// Selection thresholds as speed:0.5,occupancy:0.5,flow:50
    #[arg(long, global = true, value_parser = parse_thresholds)]
    thresholds: Option<Thresholds>,
    /// Section for train and predict
    #[arg(long, global = true)]
    section: Option<String>,
}

fn parse_thresholds(s: &str) -> Result<Thresholds, String> {
    Thresholds::parse(s).map_err(|e| e.to_string())
}

impl Flags {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if self.jobs.is_some() {
            c.jobs = self.jobs;
        }
        if let Some(v) = &self.out {
            c.out = v.clone();
        }
        if self.budget.is_some() {
            c.budget = self.budget;
        }
        if let Some(v) = self.runs {
            c.runs = v;
        }
        if let Some(v) = self.theta {
            c.transfer.theta = v;
        }
        if let Some(v) = self.steps {
            c.transfer.steps = v;
        }
        if let Some(v) = self.folds {
            c.transfer.folds = v;
        }
        if let Some(v) = self.max_depth {
            c.transfer.max_depth = v;
        }
        if let Some(v) = self.n_estimators {
            c.transfer.n_estimators = v;
        }
        if let Some(v) = &self.lambda_grid {
            c.ridge.lambda_grid = v.clone();
        }
        if let Some(v) = self.thresholds {
            c.thresholds = v;
        }
        if let Some(v) = &self.section {
            c.section = Some(v.clone());
        }
    }
}

fn run(cli: &Cli) -> Result<String, Error> {
    let mut cfg = match &cli.flags.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cli.flags.apply(&mut cfg);
    cfg.validate()?;
    pipeline::init_pool(cfg.jobs);
    let stage = match cli.command {
        Command::Ingest => pipeline::ingest,
        Command::Correct => pipeline::correct,
        Command::Pair => pipeline::pair,
        Command::Ridge => pipeline::ridge,
        Command::Train => pipeline::train,
        Command::Predict => pipeline::predict,
        Command::Evaluate => pipeline::evaluate,
        Command::GridSearch => pipeline::grid,
        Command::Synth => pipeline::synth,
        Command::Report => pipeline::report,
        Command::Pipeline => pipeline::pipeline,
    };
    stage(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("RAMP_TRANSFER_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
