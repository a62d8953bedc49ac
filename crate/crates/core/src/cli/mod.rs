//! Config-driven experiment runner.
//!
//! Exit codes: 0 success, 2 configuration error, 3 compute failure
//! (divergence, blow-up, evaluation), 4 I/O failure. Failures print a JSON
//! error object on stderr.

pub mod config;
pub mod run;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

pub use config::ExperimentConfig;
pub use run::{execute, sweep, validate, Artifacts, Command, SweepReport};

use crate::error::Error;

#[derive(Debug, Parser)]
#[command(name = "ctrl-rl", version, about = "Exploratory policy improvement and q-learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// TOML config file (`.json` is read as JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Run a single seed, replacing `run.seeds`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct LearnArgs {
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub nu: Option<f64>,
    #[arg(long = "A")]
    pub a: Option<f64>,
    #[arg(long = "B")]
    pub b: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Model-based policy iteration against the HJB oracle.
    Improve(#[command(flatten)] GlobalArgs),
    /// Semi-q-learning on the linear example.
    SemiQ {
        #[command(flatten)]
        global: GlobalArgs,
        #[command(flatten)]
        learn: LearnArgs,
    },
    /// Full q-learning on the linear example.
    QLearn {
        #[command(flatten)]
        global: GlobalArgs,
        #[command(flatten)]
        learn: LearnArgs,
    },
    /// Solve the exploratory HJB equation.
    HjbOracle(#[command(flatten)] GlobalArgs),
    /// Regret curve and rate fit from trace CSVs.
    Regret(#[command(flatten)] GlobalArgs),
    /// Monte Carlo and closed-form mean-field drift of the example family.
    MeanfieldH(#[command(flatten)] GlobalArgs),
    /// Probe the boundedness and Lipschitz assumptions.
    CheckAssumptions(#[command(flatten)] GlobalArgs),
}

impl CliCommand {
    fn parts(&self) -> (Command, &GlobalArgs, Option<&LearnArgs>) {
        match self {
            CliCommand::Improve(g) => (Command::Improve, g, None),
            CliCommand::SemiQ { global, learn } => (Command::SemiQ, global, Some(learn)),
            CliCommand::QLearn { global, learn } => (Command::QLearn, global, Some(learn)),
            CliCommand::HjbOracle(g) => (Command::HjbOracle, g, None),
            CliCommand::Regret(g) => (Command::Regret, g, None),
            CliCommand::MeanfieldH(g) => (Command::MeanfieldH, g, None),
            CliCommand::CheckAssumptions(g) => (Command::CheckAssumptions, g, None),
        }
    }
}

/// File, then environment, then flags; resolved and validated.
pub fn load_config(
    command: Command,
    global: &GlobalArgs,
    learn: Option<&LearnArgs>,
    env: impl IntoIterator<Item = (String, String)>,
) -> crate::Result<ExperimentConfig> {
    let mut table = match &global.config {
        Some(path) => config::read_table(path)?,
        None => toml::Table::new(),
    };
    config::apply_env(&mut table, env)?;
    let mut cfg = ExperimentConfig::from_table(table)?;
    if let Some(seed) = global.seed {
        cfg.run.seeds = vec![seed];
    }
    if let Some(l) = learn {
        if let Some(v) = l.iters {
            cfg.run.n_iters = v;
        }
        if let Some(v) = l.dt {
            cfg.run.dt = v;
        }
        if let Some(v) = l.batch {
            cfg.run.batch = v;
        }
        if let Some(v) = l.nu {
            cfg.schedule.nu = v;
        }
        if let Some(v) = l.a {
            cfg.schedule.a = v;
        }
        if let Some(v) = l.b {
            cfg.schedule.b = v;
        }
    }
    let cfg = cfg.resolve();
    validate(command, &cfg)?;
    Ok(cfg)
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidArgument(_) | Error::Config(_) | Error::OutOfDomain { .. } => 2,
        Error::Io(_) | Error::Csv(_) | Error::Json(_) => 4,
        Error::Evaluation(_)
        | Error::BlowUp { .. }
        | Error::Divergence { .. }
        | Error::InsufficientData(_) => 3,
    }
}

fn report_error(err: &Error) -> i32 {
    let code = exit_code(err);
    let obj = json!({ "error": { "kind": err.kind(), "message": err.to_string(), "exit_code": code } });
    eprintln!("{obj}");
    code
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (command, global, learn) = cli.command.parts();
    let cfg = match load_config(command, global, learn, std::env::vars()) {
        Ok(cfg) => cfg,
        Err(e) => return report_error(&e),
    };
    if let Some(n) = global.threads {
        // a pool can only be installed once per process; later calls keep it
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let artifacts = match execute(command, &cfg) {
        Ok(a) => a,
        Err(e) => return report_error(&e),
    };
    if let Err(e) = artifacts.write(&global.out) {
        return report_error(&e);
    }
    println!("{} -> {}", artifacts.digest, global.out.display());
    match &artifacts.failure {
        Some(e) => report_error(e),
        None => 0,
    }
}
