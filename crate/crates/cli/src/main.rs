use std::path::PathBuf;

use anyhow::Context;
use clap::{Parser, Subcommand};
use lysep_cli::{report, run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "lysep", version, about = "Train PINN and layer-separated models on manufactured PDE problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured model and seed, then write the summary table.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Validate a config without running it.
    Check {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rebuild summary tables from the trajectories in a directory.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let exp = run_experiment(&cfg)?;
            for r in &exp.results {
                if r.failed {
                    eprintln!("run {} failed; see its .failed file", r.key.stem());
                }
            }
            print!("{}", report(&cfg.output_dir)?);
            println!("summary written to {}", exp.summary_path.display());
        }
        Command::Check { config } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            println!(
                "ok: {} {:?}, M = {}, {} seed(s), {} iterations",
                cfg.problem,
                cfg.model,
                cfg.width,
                cfg.seeds.len(),
                cfg.iters
            );
        }
        Command::Report { dir } => print!("{}", report(&dir)?),
    }
    Ok(())
}
