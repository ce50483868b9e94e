//! `prfusion`: data generation, training, embedding, evaluation, robustness
//! sweeps, gradient checks and ablations from one resolved config.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prfusion_core::config::RunConfig;
use prfusion_core::Error;

#[derive(Parser, Debug)]
#[command(name = "prfusion", version, about = "Camera and LiDAR place recognition experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Every flag is also a config key; flags override the config file.
#[derive(Args, Debug)]
struct Common {
    /// key=value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, may repeat
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    train_dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    control_checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    db: Option<PathBuf>,
    #[arg(long, global = true)]
    queries: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a seeded synthetic world into a dataset directory
    GenData,
    /// Train a model on `train_dataset`, write the checkpoint and loss CSV
    Train,
    /// Describe dataset frames into a descriptor database file
    Embed {
        /// db, query or all
        #[arg(long, default_value = "db")]
        role: String,
    },
    /// Recall of a query database against a reference database
    Eval,
    /// Image noise and extrinsic error sweeps on the query frames
    Perturb,
    /// Finite-difference gradient check of every module
    Gradcheck,
    /// Train and evaluate one model per ablation arm
    Ablate {
        /// modules, attention, window, knn, samples or key=v1,v2,...
        switch: String,
    },
}

pub enum Failure {
    Core(Error),
    CheckFailed(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code_and_kind(&self) -> (u8, &'static str) {
        match self {
            Failure::CheckFailed(_) => (1, "check"),
            Failure::Core(e) if e.is_divergence() => (4, "divergence"),
            Failure::Core(Error::Config(_)) => (2, "config"),
            Failure::Core(Error::Data(_) | Error::Format { .. } | Error::Io { .. }) => (3, "data"),
            Failure::Core(_) => (1, "internal"),
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Core(e) => e.to_string(),
            Failure::CheckFailed(m) => m.clone(),
        }
    }
}

fn report(code: u8, kind: &str, message: &str) -> ExitCode {
    let line = message.split_whitespace().collect::<Vec<_>>().join(" ");
    eprintln!("error kind={kind} code={code} message={line:?}");
    ExitCode::from(code)
}

fn resolve(common: &Common) -> prfusion_core::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let flags = [
        (&common.dataset, &mut cfg.dataset),
        (&common.train_dataset, &mut cfg.train_dataset),
        (&common.checkpoint, &mut cfg.checkpoint),
        (&common.control_checkpoint, &mut cfg.control_checkpoint),
        (&common.db, &mut cfg.db),
        (&common.queries, &mut cfg.queries),
        (&common.out, &mut cfg.out),
    ];
    for (flag, slot) in flags {
        if let Some(p) = flag {
            *slot = Some(p.clone());
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return report(2, "config", first);
        }
    };
    let cfg = match resolve(&cli.common) {
        Ok(cfg) => cfg,
        Err(e) => {
            let f = Failure::from(e);
            let (code, kind) = f.code_and_kind();
            return report(code, kind, &f.message());
        }
    };
    log::info!("resolved config (hash {}):\n{}", cfg.hash(), cfg.resolved().trim_end());
    let result = match &cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Embed { role } => commands::embed(&cfg, role),
        Command::Eval => commands::eval(&cfg),
        Command::Perturb => commands::perturb(&cfg),
        Command::Gradcheck => commands::gradcheck(&cfg),
        Command::Ablate { switch } => commands::ablate(&cfg, switch),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, kind) = f.code_and_kind();
            report(code, kind, &f.message())
        }
    }
}
