//! `dmlmm` command-line runner.
//!
//! Every command reads an optional TOML [`RunConfig`]; flags override the
//! matching config keys. Failures print `{"error": {"code", "message"}}` on
//! standard error and exit with 2 (input) or 3 (numerical).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Core(dmlmm::Error),
}

impl CliError {
    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    fn code(&self) -> &'static str {
        match self {
            CliError::Input(_) => "invalid_input",
            CliError::Core(e) => e.code(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 3,
            _ => 2,
        }
    }

    fn message(&self) -> String {
        match self {
            CliError::Input(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        }
    }
}

impl From<dmlmm::Error> for CliError {
    fn from(e: dmlmm::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "dmlmm", version, about = "Deep mixtures of linear mixed models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 (the default) is the deterministic mode.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset CSV (`subject_id,t,y,holdout_flag`) or, for evaluate, a directory.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Fit bundle written by `fit`.
    #[arg(long, global = true)]
    bundle: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the model and write the bundle and ELBO trace.
    Fit,
    /// Predictive bands and mixtures for subjects of a dataset.
    Predict {
        #[arg(long)]
        subject: Vec<String>,
        /// Ignore the observations and emit the marginal predictive.
        #[arg(long)]
        marginal: bool,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Generate a dataset: dgp1, dgp2, dgp3 or blackbox.
    Simulate {
        #[arg(long)]
        generator: Option<String>,
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Held-out metrics for one dataset or a directory of replicates.
    Evaluate,
    /// Prior-predictive conflict check of one series.
    Conflict {
        #[arg(long)]
        subject: Option<String>,
        #[arg(long)]
        split: Option<usize>,
    },
    /// Pick the architecture with the best smoothed ELBO after short runs.
    SelectArch,
}

fn configure(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(cli.common.config.as_deref())?;
    let c = &cli.common;
    if let Some(s) = c.seed {
        cfg.seed = Some(s);
    }
    if let Some(t) = c.threads {
        if t == 0 {
            return Err(CliError::input("--threads must be at least 1"));
        }
        cfg.threads = t;
    }
    if c.out.is_some() {
        cfg.out = c.out.clone();
    }
    if c.data.is_some() {
        cfg.data = c.data.clone();
    }
    if c.bundle.is_some() {
        cfg.bundle = c.bundle.clone();
    }
    match &cli.command {
        Command::Predict {
            subject,
            marginal,
            threshold,
        } => {
            if !subject.is_empty() {
                cfg.predict.subjects = Some(subject.clone());
            }
            if *marginal {
                cfg.predict.retain = Some(0);
            }
            if threshold.is_some() {
                cfg.predict.threshold = *threshold;
            }
        }
        Command::Simulate { generator, replicates } => {
            if let Some(g) = generator {
                cfg.simulate.generator = g.clone();
            }
            if let Some(r) = replicates {
                cfg.simulate.replicates = *r;
            }
        }
        Command::Conflict { subject, split } => {
            if subject.is_some() {
                cfg.conflict.subject = subject.clone();
            }
            if split.is_some() {
                cfg.conflict.split = *split;
            }
        }
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = configure(cli)?;
    match cli.command {
        Command::Fit => commands::fit(&cfg),
        Command::Predict { .. } => commands::predict(&cfg),
        Command::Simulate { .. } => commands::simulate(&cfg),
        Command::Evaluate => commands::evaluate(&cfg),
        Command::Conflict { .. } => commands::conflict(&cfg),
        Command::SelectArch => commands::select_arch(&cfg),
    }
}

fn fail(code: &str, message: &str, exit: u8) -> ExitCode {
    let body = serde_json::json!({ "error": { "code": code, "message": message } });
    eprintln!("{body}");
    ExitCode::from(exit)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return fail("usage_error", e.to_string().trim(), 2),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.code(), &e.message(), e.exit_code()),
    }
}
