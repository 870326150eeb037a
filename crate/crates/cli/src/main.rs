//! `kavi`: synthesize data, train, sweep ablations, report, and print costs.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.

mod report;
mod runs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kavi_core::config::{AblationMode, ExperimentConfig};
use kavi_core::Error;

#[derive(Parser)]
#[command(name = "kavi", version, about = "Teacher adaptation and progressive distillation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root.
    #[arg(long, env = "KAVI_OUT", default_value = "runs")]
    out: PathBuf,
    /// 400 epochs and 1000 samples per class.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Clone)]
struct Repeat {
    /// Number of seeds, counting up from the config seed.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    /// Concurrent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Write source and target archives with a manifest.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train one mode, once per seed.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        repeat: Repeat,
        #[arg(long)]
        mode: Option<AblationMode>,
    },
    /// Train several modes (all by default).
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        repeat: Repeat,
        #[arg(long, value_delimiter = ',')]
        modes: Vec<AblationMode>,
    },
    /// Summarize completed runs under a directory.
    Report {
        dir: PathBuf,
    },
    /// Parameter, size and FLOP counts.
    Cost {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Teacher node counts to tabulate.
        #[arg(long, value_delimiter = ',', default_values_t = [32usize, 64, 128, 256])]
        nodes: Vec<usize>,
    },
}

/// Failure with its exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Divergence(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Divergence(_) => 3,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            Error::Divergence { .. } => Failure::Divergence(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Divergence(m) => f.write_str(m),
        }
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig, Failure> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_toml(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn resolve(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = load_config(common.config.as_ref())?;
    if common.paper_scale {
        cfg = cfg.paper_scale();
    }
    if let Some(e) = common.epochs {
        cfg.run.epochs = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth { common } => {
            let cfg = resolve(&common)?;
            runs::synth(&cfg, &common.out)
        }
        Command::Train { common, repeat, mode } => {
            let mut cfg = resolve(&common)?;
            if let Some(m) = mode {
                cfg.run.mode = m;
            }
            runs::train_modes(&cfg, &[cfg.run.mode], repeat.seeds, repeat.jobs, &common.out)
        }
        Command::Sweep { common, repeat, modes } => {
            let cfg = resolve(&common)?;
            let modes = if modes.is_empty() { AblationMode::ALL.to_vec() } else { modes };
            runs::train_modes(&cfg, &modes, repeat.seeds, repeat.jobs, &common.out)
        }
        Command::Report { dir } => report::report(&dir),
        Command::Cost { config, nodes } => {
            let cfg = load_config(config.as_ref())?;
            report::cost(&cfg, &nodes)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
