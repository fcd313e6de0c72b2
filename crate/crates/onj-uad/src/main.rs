use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use onj_uad::{Command, Pipeline, PipelineConfig};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Gen,
    Train1,
    Train2,
    Reconstruct,
    Score,
    Segment,
    Export,
    All,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Gen => Command::Gen,
            Cmd::Train1 => Command::Train1,
            Cmd::Train2 => Command::Train2,
            Cmd::Reconstruct => Command::Reconstruct,
            Cmd::Score => Command::Score,
            Cmd::Segment => Command::Segment,
            Cmd::Export => Command::Export,
            Cmd::All => Command::All,
        }
    }
}

/// Unsupervised jaw-lesion detection on synthetic phantoms.
#[derive(Debug, Parser)]
#[command(name = "onj-uad", version)]
struct Args {
    command: Cmd,
    /// Pipeline configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Override a setting, e.g. `--set train.epochs_stage1=10`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for per-subject reconstruction.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Force single-threaded execution.
    #[arg(long)]
    deterministic: bool,
    /// Suppress progress output.
    #[arg(long, short)]
    quiet: bool,
}

fn run(args: Args) -> onj_uad::Result<()> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    cfg.apply_overrides(&args.overrides)?;
    let base = args.config.parent().map(PathBuf::from).unwrap_or_default();
    let mut p = Pipeline::new(cfg, &base);
    p.threads = if args.deterministic { 1 } else { args.threads.max(1) };
    p.verbose = !args.quiet;
    p.run(args.command.into())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
