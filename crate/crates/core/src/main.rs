use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use lat::pipeline::{exit_code, run_all, run_stage, RunConfig, RunOptions, Stage};

#[derive(Parser)]
#[command(name = "lat", version, about = "Label-aligned transfer of detection annotations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (TOML).
    #[arg(long, short, global = true, default_value = "lat.toml")]
    config: PathBuf,
    /// Worker threads for per-image work.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Write per-image fusion traces during transfer.
    #[arg(long, global = true)]
    dump_attention: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate (or import) the benchmark datasets.
    GenBench,
    /// Train one detector per dataset in its own label space.
    TrainDetectors,
    /// Produce pseudo-labels for every image in every label space.
    PseudoLabel,
    /// Train the transfer model for the target label space.
    TrainLat,
    /// Rewrite every dataset's annotations into the target label space.
    Transfer,
    /// Train baseline, pseudo-label and transferred-label detectors.
    TrainDownstream,
    /// Score downstream detectors and transfer quality.
    Evaluate,
    /// Compare the fusion variants.
    AblateSff,
    /// Compare batch-composition strategies downstream.
    AblateStrategy,
    /// Every pipeline stage in order.
    RunAll,
}

fn stage(c: Command) -> Option<Stage> {
    Some(match c {
        Command::GenBench => Stage::GenBench,
        Command::TrainDetectors => Stage::TrainDetectors,
        Command::PseudoLabel => Stage::PseudoLabel,
        Command::TrainLat => Stage::TrainLat,
        Command::Transfer => Stage::Transfer,
        Command::TrainDownstream => Stage::TrainDownstream,
        Command::Evaluate => Stage::Evaluate,
        Command::AblateSff => Stage::AblateSff,
        Command::AblateStrategy => Stage::AblateStrategy,
        Command::RunAll => return None,
    })
}

fn run(cli: &Cli) -> Result<String, lat::Error> {
    let cfg = RunConfig::load(&cli.config)?;
    let opts = RunOptions {
        workers: cli.workers.max(1),
        dump_attention: cli.dump_attention,
    };
    match stage(cli.command) {
        Some(s) => run_stage(s, &cfg, opts),
        None => run_all(&cfg, opts),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli).with_context(|| format!("using config {}", cli.config.display())) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.downcast_ref::<lat::Error>().map_or(1, exit_code);
            eprintln!("error: {e:#}");
            ExitCode::from(code as u8)
        }
    }
}
