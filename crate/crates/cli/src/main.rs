use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use enrollcast::config::RunConfig;
use enrollcast::error::{Error, Result};
use enrollcast::pipeline::{self, Command};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    /// Generate a synthetic cohort.
    Gen,
    /// Filter the cohort and assemble the feature matrix.
    Prepare,
    /// Fit the configured model.
    Train,
    /// Forecast every study with the trained model.
    Predict,
    /// Cross-validate, score the holdout and write reports.
    Evaluate,
    /// Prediction bands and their calibration.
    Intervals,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Gen => Command::Gen,
            Cmd::Prepare => Command::Prepare,
            Cmd::Train => Command::Train,
            Cmd::Predict => Command::Predict,
            Cmd::Evaluate => Command::Evaluate,
            Cmd::Intervals => Command::Intervals,
        }
    }
}

/// Site-month enrollment forecasting for clinical trials.
#[derive(Debug, Parser)]
#[command(name = "enrollcast", version)]
struct Cli {
    #[arg(value_enum)]
    command: Cmd,
    /// TOML run configuration; relative paths inside it are resolved from
    /// its directory.
    #[arg(long)]
    config: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(&cli.config)?.with_overrides(cli.seed, cli.threads)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config {
                key: "threads".into(),
                message: e.to_string(),
            })?;
    }
    let base = cli
        .config
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let manifest = pipeline::run(cli.command.into(), &cfg, base)?;
    for f in &manifest.outputs {
        println!("{}  {}", f.sha256, f.path);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
