use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mfrl_bench::report::collect_summaries;
use mfrl_bench::{compare_report, Controller, Experiment, ExperimentConfig, Result};

/// Seeded experiments for the run-to-run controllers on the CMP plant.
#[derive(Parser)]
#[command(name = "mfrl-bench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config file (flat `key = value`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Number of replications; overrides the config.
    #[arg(long, global = true)]
    replications: Option<usize>,

    /// Worker threads (0 = all cores); overrides the config.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Offline cycles with Bayesian disturbance inference; writes the memory buffer.
    Phase1,
    /// Online cycles replaying the memory buffer.
    Phase2,
    /// Basic random-search controller.
    Basic,
    /// DOE regression controller.
    Apc,
    /// Zero recipe on every run.
    Nocontrol,
    /// Merges the summaries in the output directory into a comparison table.
    Report,
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(r) = cli.replications {
        cfg.replications = r;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load(&cli)?;
    let controller = match cli.command {
        Command::Phase1 => Controller::Phase1,
        Command::Phase2 => Controller::Phase2,
        Command::Basic => Controller::Basic,
        Command::Apc => Controller::Apc,
        Command::Nocontrol => Controller::NoControl,
        Command::Report => {
            let rows = collect_summaries(&cfg.out_dir)?;
            let rep = compare_report(&rows);
            std::fs::write(cfg.out_dir.join("report.csv"), &rep.summary_csv)?;
            std::fs::write(cfg.out_dir.join("ratios.csv"), &rep.ratios_csv)?;
            print!("{}", rep.table);
            return Ok(());
        }
    };
    let row = Experiment::new(cfg)?.run(controller)?;
    println!(
        "{} [R {}]: mean MCC {:.6e}, std {:.6e}, {} replications",
        row.controller,
        row.r_mode.as_str(),
        row.mcc_mean,
        row.mcc_std,
        row.replications
    );
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
