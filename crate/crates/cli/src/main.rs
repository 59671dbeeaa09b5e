//! `vaflab` command-line driver.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vaflab::bench::SweepAxis;

use crate::commands::Ctx;
use crate::config::{MethodArg, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "vaflab", version, about = "Visual amplification fusion on a toy multimodal decoder")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for reports (defaults to paths.report_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the training corpus and the probe set.
    GenData,
    /// Train a model on the corpus and write a checkpoint.
    Train,
    /// Evaluate one decoding method on the probes.
    Eval {
        #[arg(long, value_enum)]
        method: MethodArg,
    },
    /// Per-layer saliency and attention allocation profile.
    Saliency,
    /// Sweep one VAF setting.
    Ablate {
        #[arg(long, value_enum)]
        axis: AxisArg,
    },
    /// Print the default configuration.
    DefaultConfig,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum AxisArg {
    Alpha,
    Beta,
    Window,
    Sampler,
}

impl From<AxisArg> for SweepAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::Alpha => SweepAxis::Alpha,
            AxisArg::Beta => SweepAxis::Beta,
            AxisArg::Window => SweepAxis::Window,
            AxisArg::Sampler => SweepAxis::Sampler,
        }
    }
}

fn usage_error(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::DefaultConfig = cli.command {
        println!("{}", serde_json::to_string_pretty(&RunConfig::default()).expect("config serializes"));
        return ExitCode::SUCCESS;
    }
    let Some(path) = cli.config else {
        return usage_error("--config is required");
    };
    let mut cfg = match RunConfig::load(&path) {
        Ok(c) => c,
        Err(e) => return usage_error(format!("{e:#}")),
    };
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    if let Some(n) = cli.threads {
        if n == 0 {
            return usage_error("--threads must be positive");
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return usage_error(e);
        }
    }
    let ctx = Ctx::new(cfg, cli.out);
    let result = match cli.command {
        Command::GenData => commands::gen_data(&ctx),
        Command::Train => commands::train_model(&ctx),
        Command::Eval { method } => commands::eval(&ctx, method),
        Command::Saliency => commands::saliency(&ctx),
        Command::Ablate { axis } => commands::ablate(&ctx, axis.into()),
        Command::DefaultConfig => unreachable!(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
