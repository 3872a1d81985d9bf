use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod output;

use config::{ExperimentConfig, Suite};

#[derive(Parser, Debug)]
#[command(name = "chainlab", version, about = "Backbone simulator and bound calculator for Bitcoin and Prism")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Evaluate the closed-form bounds over the configured grid.
    Bounds(Common),
    /// Run seeded trials and write records and reports.
    Simulate(Common),
    /// Run the selected acceptance suites; exit status 1 on any violation.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Check a hand-built run with planted violations instead of the config.
        #[arg(long)]
        planted: bool,
    },
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<u64>,
    /// Worker threads; defaults to CHAINLAB_THREADS, then the core count.
    #[arg(long, env = "CHAINLAB_THREADS")]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict to these suites (repeatable).
    #[arg(long = "suite", value_enum)]
    suites: Vec<Suite>,
    #[arg(long)]
    unsafe_override: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let path = self.config.as_ref().context("--config is required")?;
        let mut cfg = ExperimentConfig::load(path)?;
        if let Some(seed) = self.seed {
            cfg.params.seed = seed;
        }
        if let Some(trials) = self.trials {
            cfg.trials = trials;
        }
        if let Some(out) = &self.out {
            cfg.outputs.dir = out.clone();
        }
        if !self.suites.is_empty() {
            cfg.suites = self.suites.clone();
        }
        cfg.unsafe_override |= self.unsafe_override;
        Ok(cfg)
    }

    fn init_threads(&self) -> Result<()> {
        if let Some(n) = self.threads {
            rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("starting thread pool")?;
        }
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Bounds(c) => c.init_threads().and_then(|_| commands::bounds(&c.load()?)),
        Command::Simulate(c) => c.init_threads().and_then(|_| commands::simulate(&c.load()?)),
        Command::Verify { common, planted: true } => common.init_threads().and_then(|_| commands::verify_planted(common.out.as_deref())),
        Command::Verify { common, planted: false } => common.init_threads().and_then(|_| commands::verify(&common.load()?)),
    };
    match outcome {
        Ok(commands::Status::Clean) => ExitCode::SUCCESS,
        Ok(commands::Status::Violations) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
