use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gaussianssc::commands::{cmd_ablate, cmd_eval, cmd_export, cmd_gradcheck, cmd_train, Overrides};
use gaussianssc::config::RunConfig;
use gaussianssc::par::with_threads;
use gaussianssc::{Error, Result};

/// Two-stage semantic scene completion on synthetic desk scenes.
#[derive(Parser)]
#[command(name = "gaussianssc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Stage to train or evaluate (1 or 2).
    #[arg(long, global = true)]
    stage: Option<usize>,
    /// Checkpoint directory written by `train`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed of scenes, initialization and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Finite-difference check of every op and both pipelines.
    Gradcheck,
    /// Train one stage on the synthetic suite.
    Train,
    /// Evaluate a checkpoint; prints JSON lines.
    Eval,
    /// Run the ablation matrix; prints CSV.
    Ablate,
    /// Write predictions and ground truth of a held-out scene as GSSC files.
    Export,
}

fn config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Overrides {
        stage: cli.stage,
        out: cli.out.clone(),
        seed: cli.seed,
        threads: cli.threads,
    }
    .apply(&mut cfg)?;
    Ok(cfg)
}

fn checkpoint(cli: &Cli) -> Result<PathBuf> {
    cli.checkpoint
        .clone()
        .ok_or_else(|| Error::config("this command needs --checkpoint"))
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = config(cli)?;
    with_threads(cfg.threads, || {
        let stdout = io::stdout();
        let mut out = stdout.lock();
        dispatch(cli, &cfg, &mut out)
    })
}

fn dispatch(cli: &Cli, cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Gradcheck => {
            let failures = cmd_gradcheck(cfg, out)?;
            match failures.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)) {
                None => Ok(()),
                Some(worst) => {
                    let names: Vec<&str> = failures.iter().map(|e| e.op.as_str()).collect();
                    eprintln!("gradcheck failed: {}", names.join(", "));
                    Err(Error::GradCheck {
                        op: worst.op.clone(),
                        error: worst.max_rel_error,
                        tolerance: worst.tolerance,
                    })
                }
            }
        }
        Command::Train => cmd_train(cfg, out).map(|s| eprintln!("checkpoint written to {}", s.dir.display())),
        Command::Eval => cmd_eval(cfg, &checkpoint(cli)?, out).map(drop),
        Command::Ablate => cmd_ablate(cfg, out).map(drop),
        Command::Export => {
            for p in cmd_export(cfg, &checkpoint(cli)?)? {
                writeln!(out, "{}", p.display()).map_err(|e| Error::io("<stdout>", e))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
