//! `mpib`: runs synthetic-corpus experiments from a TOML config and writes
//! JSON or CSV reports.
//!
//! Exit status: 0 on success, 1 on a runtime failure, 2 on a bad config.

mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Format, RunConfig};
use report::Report;

#[derive(Debug, Parser)]
#[command(
    name = "mpib",
    version,
    about = "Mixed-precision information bottleneck experiments"
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Report format (overrides the config).
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Generate the synthetic corpus and write its manifest and feature caches.
    Synth,
    /// Masked-patch pretraining of the encoder.
    Pretrain,
    /// Train heads on the first fold and save a checkpoint.
    Train,
    /// Speaker-independent cross-validation of the configured model.
    Eval,
    /// Bit-width or capacity-matched sweep.
    Sweep,
    /// Identification, verification and MI leakage of trait and state embeddings.
    Leakage,
    /// Utility and leakage over a grid of trait-noise levels.
    PrivacyTradeoff,
    /// Energy arithmetic and unit audit.
    Energy,
    /// Kernel micro-benchmarks and the DPS timing model.
    Bench,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Pretrain => "pretrain",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
            Command::Leakage => "leakage",
            Command::PrivacyTradeoff => "privacy-tradeoff",
            Command::Energy => "energy",
            Command::Bench => "bench",
        }
    }

    fn run(self, cfg: &RunConfig) -> mpib::Result<commands::Output> {
        match self {
            Command::Synth => commands::synth(cfg),
            Command::Pretrain => commands::pretrain(cfg),
            Command::Train => commands::train(cfg),
            Command::Eval => commands::eval(cfg),
            Command::Sweep => commands::sweep(cfg),
            Command::Leakage => commands::leakage(cfg),
            Command::PrivacyTradeoff => commands::privacy(cfg),
            Command::Energy => commands::energy(cfg),
            Command::Bench => commands::bench(cfg),
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, Vec<String>> {
    let mut cfg = match &cli.config {
        Some(p) => config::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(f) = cli.format {
        cfg.format = f;
    }
    config::validate_config(&cfg)?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(errors) => {
            for e in errors {
                eprintln!("config error: {e}");
            }
            return ExitCode::from(2);
        }
    };
    if let Ok(Some(n)) = config::threads_from_env() {
        log::info!("worker cap {n} (kernels and training run single-threaded)");
    }
    log::info!(
        "resolved config:\n{}",
        toml::to_string(&cfg).unwrap_or_default()
    );

    let command = cli.command;
    let result = command.run(&cfg).and_then(|(results, table)| {
        let report = Report {
            command: command.name(),
            config: &cfg,
            results,
            table,
        };
        std::fs::create_dir_all(&cfg.out)?;
        std::fs::write(
            cfg.out.join("config.toml"),
            toml::to_string(&cfg).map_err(|e| mpib::Error::Format(e.to_string()))?,
        )?;
        Ok(report.emit(&cfg.out, cfg.format)?)
    });
    match result {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
