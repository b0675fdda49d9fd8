use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gap_core::config::PipelineConfig;
use gap_core::pipeline::{self, Layout};
use gap_core::Error;

/// Gradient ascent post-training for small language models.
#[derive(Parser)]
#[command(name = "gap", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for sweeps; overrides the config.
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic corpora and validation datasets.
    Corpora {
        #[command(subcommand)]
        action: CorporaAction,
    },
    /// Pretrain the base model and measure bucket familiarity.
    Pretrain,
    /// Single GAP runs and sweeps.
    Gap {
        #[command(subcommand)]
        action: GapAction,
    },
    /// Evaluate a checkpoint on the validation suite.
    Eval {
        /// Defaults to the base checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Rebuild the report from the run log.
    Report,
    /// Corpora, pretraining, sweep and report in one go.
    Pipeline,
}

#[derive(Subcommand)]
enum CorporaAction {
    Build,
}

#[derive(Subcommand)]
enum GapAction {
    /// One scheduled run, e.g. `mem-000`, with its best-epoch checkpoint.
    Run {
        #[arg(long)]
        run_id: String,
    },
    /// Every scheduled run.
    Sweep {
        /// Keep runs already in the log.
        #[arg(long)]
        resume: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::GapConfig(_) | Error::ModelConfig(_) => 2,
        Error::MajorityDegraded { .. } => 3,
        Error::Io { .. } => 4,
        _ => 1,
    }
}

fn load_config(c: &Common) -> gap_core::Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(j) = c.jobs {
        cfg.sweep.jobs = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print<T: serde::Serialize>(value: &T) -> gap_core::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> gap_core::Result<()> {
    let cfg = load_config(&cli.common)?;
    let layout = Layout::new(&cli.common.out);
    match cli.command {
        Command::Corpora {
            action: CorporaAction::Build,
        } => {
            pipeline::build_corpora(&cfg, &layout)?;
            println!("{}", layout.manifest().display());
        }
        Command::Pretrain => print(&pipeline::pretrain_base(&cfg, &layout)?)?,
        Command::Gap {
            action: GapAction::Run { run_id },
        } => print(&pipeline::single_run(&cfg, &layout, &run_id)?.run_line())?,
        Command::Gap {
            action: GapAction::Sweep { resume },
        } => print(&pipeline::sweep(&cfg, &layout, resume)?)?,
        Command::Eval { checkpoint } => {
            let path = checkpoint.unwrap_or_else(|| layout.base_checkpoint());
            print(&pipeline::evaluate_checkpoint(&cfg, &layout, &path)?)?
        }
        Command::Report => print(&pipeline::report(&layout)?)?,
        Command::Pipeline => print(&pipeline::run_pipeline(&cfg, &layout)?)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
