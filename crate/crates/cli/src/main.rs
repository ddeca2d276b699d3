use std::path::PathBuf;
use std::process::ExitCode;

use adafl::harness::{report, run_experiment, run_sweep, ExperimentConfig, RawConfig, Summary};
use anyhow::Context;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "adafl",
    version,
    about = "Federated learning experiments with adaptive aggregation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config.
    Run {
        config: PathBuf,
        /// Directory for trace and summary files.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        repeats: Option<u32>,
    },
    /// Run every line of a sweep file.
    Sweep {
        file: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the summary table of an output directory.
    Report { dir: PathBuf },
}

fn print_summary(s: &Summary) {
    let mut line = format!(
        "{} [{} {} case {} {}] loss {:.6} ± {:.6}",
        s.name, s.model, s.mode, s.case, s.policy, s.mean_final_loss, s.std_final_loss
    );
    if let Some(a) = s.mean_accuracy {
        line += &format!(", accuracy {a:.4}");
    }
    if let Some(t) = s.mean_tau {
        line += &format!(", mean tau {t:.2}");
    }
    line += &format!(", iterations {:.1} over {} repeats", s.mean_iterations, s.repeats);
    println!("{line}");
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            repeats,
        } => {
            let mut raw = RawConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(s) = seed {
                raw.set("seed", s.to_string());
            }
            if let Some(r) = repeats {
                raw.set("repeats", r.to_string());
            }
            let cfg = ExperimentConfig::from_raw(&raw)?;
            let result = run_experiment(&cfg, out.as_deref())?;
            print_summary(&result.summary);
            if let Some(dir) = out {
                println!("wrote {}", dir.display());
            }
        }
        Command::Sweep { file, out } => {
            for s in run_sweep(&file, out.as_deref())? {
                print_summary(&s);
            }
        }
        Command::Report { dir } => print!("{}", report(&dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
