use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rgc_pipeline::{ExperimentConfig, Runner};

#[derive(Parser)]
#[command(
    name = "rgc",
    about = "Retinal population pipeline: stimuli, spikes, rates, mcRBM training and evaluation",
    version
)]
struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the configured master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Restrict processing to these patch ids (comma-separated, e.g. 0,1,4).
    #[arg(long, global = true, value_delimiter = ',')]
    patches: Option<Vec<u32>>,

    /// Override the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate stimuli and synthetic spike trains.
    Simulate,
    /// Estimate, select, partition, and standardize firing rates.
    Rates,
    /// Train one model per patch.
    Train,
    /// Mutual information and triggered-average images.
    Eval,
    /// Aggregate a plain-text summary of the run.
    Report,
    /// All stages in order.
    Run,
}

fn load_config(cli: &Cli) -> rgc_pipeline::Result<ExperimentConfig> {
    let path = cli.config.as_ref().ok_or_else(|| {
        rgc_pipeline::PipelineError::Config("--config PATH is required".into())
    })?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let runner = match Runner::new(cfg, cli.patches.clone()) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Simulate => runner.simulate(),
        Command::Rates => runner.rates(),
        Command::Train => runner.train(),
        Command::Eval => runner.eval(),
        Command::Report => runner.report(),
        Command::Run => runner.run(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
