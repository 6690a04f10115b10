use std::path::PathBuf;
use std::process::ExitCode;

use agrekd::engine::Method;
use agrekd::Result;
use agrekd_cli::commands::{self, Context};
use agrekd_cli::config::{ExperimentConfig, SweepAxis, OUTPUT_ROOT_ENV};
use clap::{Parser, Subcommand};

/// Group-robust ensemble distillation experiments on synthetic spurious data.
#[derive(Parser, Debug)]
#[command(name = "agrekd", version)]
struct Cli {
    /// TOML experiment config; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root, overriding `output_dir` in the config.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    output: Option<PathBuf>,
    /// Run a single seed instead of the config's list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Student methods to run (repeatable), overriding the config's list.
    #[arg(long, global = true)]
    method: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train, held-out and test CSVs plus a manifest per seed.
    Generate,
    /// Train the ERM teachers, designate the biased model, and retrain the configured share.
    TrainTeachers,
    /// Redo only the last-layer retraining on stored ERM teachers.
    Dfr,
    /// Distill every configured method and write metrics.csv.
    Distill,
    /// Print test metrics of checkpoints as JSON lines.
    Evaluate {
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
    },
    /// Sweep one axis (ratio, tau, ensemble_size, student_width).
    Sweep {
        #[arg(long)]
        axis: String,
    },
}

fn context(cli: &Cli) -> Result<Context> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.output {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if !cli.method.is_empty() {
        cfg.student.methods = cli.method.iter().map(|m| m.parse::<Method>()).collect::<Result<_>>()?;
    }
    cfg.validate()?;
    Ok(Context::new(cfg))
}

fn run(cli: &Cli) -> Result<()> {
    let ctx = context(cli)?;
    match &cli.command {
        Command::Generate => {
            for p in commands::cmd_generate(&ctx)? {
                println!("wrote {}", p.display());
            }
        }
        Command::TrainTeachers => commands::cmd_train_teachers(&ctx)?,
        Command::Dfr => commands::cmd_dfr(&ctx)?,
        Command::Distill => println!("wrote {}", commands::cmd_distill(&ctx)?.display()),
        Command::Evaluate { checkpoint } => {
            for (path, m) in commands::cmd_evaluate(&ctx, checkpoint, ctx.cfg.seeds[0])? {
                let line = serde_json::json!({ "checkpoint": path, "metrics": m });
                println!("{line}");
            }
        }
        Command::Sweep { axis } => {
            let axis: SweepAxis = axis.parse()?;
            println!("wrote {}", commands::cmd_sweep(&ctx, axis)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
