//! Command-line driver for the ESG news volatility pipeline.

mod config;
mod error;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::PipelineConfig;
use error::{CliError, CliResult};
use stages::Ctx;

#[derive(Parser, Debug)]
#[command(name = "esgvol", version, about = "Forecast stock volatility from ESG news")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the sampler and the simulator; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory holding inputs and stage artifacts.
    #[arg(long, global = true, env = "E2R_WORKDIR")]
    workdir: Option<PathBuf>,
    /// Proceed even when upstream artifacts fail their manifest check.
    #[arg(long, global = true)]
    force: bool,
    /// Abort on the first malformed news line instead of skipping it.
    #[arg(long, global = true)]
    strict: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter ESG news and link tickers.
    Extract,
    /// Sentiment and embedding features pooled per stock and period.
    Featurize,
    /// Join features with forward volatility targets for every horizon.
    Dataset,
    /// Sample the posterior ensemble for every horizon.
    Train {
        /// Also train the sentiment-only baseline.
        #[arg(long)]
        senti: bool,
    },
    /// Score every split with the trained ensembles.
    Predict,
    /// Test-split error table.
    Evaluate,
    /// Quintile portfolios formed on predicted volatility.
    Backtest,
    /// Write a synthetic market and news corpus to the configured input paths.
    Simgen,
    /// Run every stage in order.
    Pipeline {
        #[arg(long)]
        senti: bool,
        /// Generate the synthetic inputs first.
        #[arg(long)]
        simulate: bool,
    },
}

fn context(cli: &Cli) -> CliResult<Ctx> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(w) = &cli.workdir {
        cfg.workdir = Some(w.clone());
    }
    cfg.validate()?;
    let workdir = match &cfg.workdir {
        Some(w) if w.is_relative() => match &cli.config {
            Some(c) if cli.workdir.is_none() => c.parent().unwrap_or(".".as_ref()).join(w),
            _ => w.clone(),
        },
        Some(w) => w.clone(),
        None => PathBuf::from("."),
    };
    std::fs::create_dir_all(&workdir)
        .map_err(|e| CliError::Usage(format!("cannot create workdir {}: {e}", workdir.display())))?;
    Ok(Ctx { cfg, workdir, force: cli.force, strict: cli.strict })
}

fn run(cli: &Cli) -> CliResult<()> {
    let ctx = context(cli)?;
    match cli.command {
        Command::Extract => stages::extract(&ctx),
        Command::Featurize => stages::featurize_stage(&ctx),
        Command::Dataset => stages::dataset(&ctx),
        Command::Train { senti } => stages::train(&ctx, senti),
        Command::Predict => stages::predict(&ctx),
        Command::Evaluate => stages::evaluate(&ctx),
        Command::Backtest => stages::backtest(&ctx),
        Command::Simgen => stages::simgen(&ctx),
        Command::Pipeline { senti, simulate } => stages::pipeline(&ctx, senti, simulate),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
