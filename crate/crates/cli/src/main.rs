//! `tpmcf`: temporal QoS prediction pipeline. Exit codes: 0 success,
//! 1 usage error, 2 runtime error.

mod cache;
mod ops;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tpmcf::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "tpmcf", version, about = "Temporal QoS prediction pipeline")]
struct Cli {
    /// Flat `key = value` experiment config file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key (repeatable), e.g. --set lambda=0.05
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run with this single seed (replaces the config's seed list).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cache directory; also settable via TPMCF_CACHE_DIR.
    #[arg(long, global = true, value_name = "DIR")]
    cache_dir: Option<PathBuf>,
    /// Write the primary output here instead of stdout.
    #[arg(long, global = true, value_name = "FILE")]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the dataset into the binary tensor cache and print its summary.
    Ingest,
    /// Print summary statistics of the (cached) tensor.
    Summarize,
    /// Score and remove outliers; print the removal report.
    Outliers {
        /// Fraction of observed entries to remove (overrides the config).
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Build and cache the per-time-step initial features.
    Features,
    /// Train the spatial model and write its checkpoint.
    TrainGcmf,
    /// Train the temporal model and write its checkpoint.
    TrainPte,
    /// Predict a triples file (`user service time` lines) as CSV.
    Predict {
        #[arg(long, value_name = "FILE")]
        triples: PathBuf,
        /// Spatial checkpoint to load instead of the cached one.
        #[arg(long, value_name = "FILE")]
        gcmf: Option<PathBuf>,
        /// Temporal checkpoint to load instead of the cached one.
        #[arg(long, value_name = "FILE")]
        pte: Option<PathBuf>,
    },
    /// Run the configured experiment and emit its report.
    Evaluate {
        /// Also write per-time-step MAE as a two-column CSV.
        #[arg(long, value_name = "FILE")]
        per_t_csv: Option<PathBuf>,
        /// Emit a one-line CSV row instead of JSON.
        #[arg(long)]
        csv: bool,
    },
    /// Module and feature ablations; prints a CSV table.
    Ablate,
    /// Grid over one config key; prints a (value, mae) CSV.
    Sweep {
        /// Config key, or the aliases T (window) and h (heads).
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

enum Failure {
    Usage(String),
    Runtime(tpmcf::error::Error),
}

impl From<tpmcf::error::Error> for Failure {
    fn from(err: tpmcf::error::Error) -> Self {
        Failure::Runtime(err)
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::new(""),
    };
    for pair in &cli.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(dir) = &cli.cache_dir {
        cfg.cache_dir = dir.display().to_string();
    } else if let Ok(dir) = std::env::var("TPMCF_CACHE_DIR") {
        if !dir.is_empty() {
            cfg.cache_dir = dir;
        }
    }
    if let Some(path) = &cli.output {
        cfg.output = path.display().to_string();
    }
    Ok(cfg)
}

fn emit(target: &str, text: &str) -> Result<(), Failure> {
    if target.is_empty() || target == "-" {
        print!("{text}");
    } else {
        std::fs::write(target, text).map_err(tpmcf::error::Error::from)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = load_config(&cli)?;
    let out = match &cli.command {
        Command::Ingest => ops::cmd_ingest(&cfg)?,
        Command::Summarize => ops::cmd_ingest(&cfg)?,
        Command::Outliers { lambda } => {
            if let Some(l) = lambda {
                cfg.lambda = *l;
            }
            ops::cmd_outliers(&cfg)?
        }
        Command::Features => ops::cmd_features(&cfg)?,
        Command::TrainGcmf => ops::cmd_train_gcmf(&cfg)?,
        Command::TrainPte => ops::cmd_train_pte(&cfg)?,
        Command::Predict { triples, gcmf, pte } => {
            ops::cmd_predict(&cfg, triples, gcmf.as_deref(), pte.as_deref())?
        }
        Command::Evaluate { per_t_csv, csv } => {
            ops::cmd_evaluate(&cfg, per_t_csv.as_deref(), *csv)?
        }
        Command::Ablate => ops::cmd_ablate(&cfg)?,
        Command::Sweep { param, values } => ops::cmd_sweep(&cfg, param, values)?,
    };
    emit(&cfg.output, &out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { 1 } else { 0 };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(err)) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}
