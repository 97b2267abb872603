//! `scp`: prepare splits, estimate label correlation, train, evaluate and
//! visualize from one experiment config.
//!
//! Exit codes: 0 success, 2 bad input or config, 3 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use scp_core::prompt::{FillPolicy, TargetMode};
use scp_core::trainer::SoftclScope;

use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "scp", version, about = "Few-shot emotion classification with prompt chains and soft contrastive learning")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Overrides {
    /// Experiment config (TOML). Relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    scope: Option<Scope>,
    #[arg(long, global = true, value_enum)]
    target_mode: Option<Mode>,
    #[arg(long, global = true, value_enum)]
    fill_policy: Option<Fill>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long, global = true)]
    tau: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Scope {
    Batch,
    EpochMemory,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Literal,
    Hierarchy,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Fill {
    Gold,
    Predicted,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw the K-shot split and write split.json.
    Prepare,
    /// Estimate label correlation and write the contrastive weights.
    Correlation,
    /// Train the reference encoder and write a checkpoint plus history.
    Train {
        /// Continue from this checkpoint; its history.json is extended.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write report.json.
    Eval {
        /// Corpus to evaluate instead of the split's test set.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Project sentence representations with t-SNE and write tsne.png/tsne.csv.
    Visualize {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.k {
            cfg.k = v;
        }
        if let Some(v) = &self.out {
            cfg.out = v.clone();
        }
        if let Some(v) = self.scope {
            cfg.train.softcl_scope = match v {
                Scope::Batch => SoftclScope::Batch,
                Scope::EpochMemory => SoftclScope::EpochMemory,
            };
        }
        if let Some(v) = self.target_mode {
            cfg.train.target_mode = match v {
                Mode::Literal => TargetMode::Literal,
                Mode::Hierarchy => TargetMode::Hierarchy,
            };
        }
        if let Some(v) = self.fill_policy {
            cfg.train.fill_policy = match v {
                Fill::Gold => FillPolicy::Gold,
                Fill::Predicted => FillPolicy::Predicted,
            };
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.tau {
            cfg.train.tau = v;
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut cfg = match &cli.overrides.config {
        Some(path) => match ExperimentConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e:#}");
                return ExitCode::from(commands::INPUT);
            }
        },
        None => ExperimentConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    let result = match &cli.command {
        Command::Prepare => commands::prepare(&cfg),
        Command::Correlation => commands::correlation(&cfg),
        Command::Train { resume } => commands::train(&cfg, resume.as_deref()),
        Command::Eval { input, checkpoint } => commands::eval(&cfg, input.as_deref(), checkpoint.as_deref()),
        Command::Visualize { input, checkpoint } => commands::visualize(&cfg, input.as_deref(), checkpoint.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
