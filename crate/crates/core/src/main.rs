use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tbft::error::{Error, Result};
use tbft::harness::{self, ExperimentConfig, RESULTS_CSV};

#[derive(Parser)]
#[command(
    name = "tbft",
    version,
    about = "Block-selective fine-tuning experiments on synthetic drift"
)]
struct Cli {
    /// JSON experiment config; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master_seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory shared by all subcommands.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for independent training runs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the source pool, drifted targets and splits.
    GenData,
    /// Train the base model on the source split.
    TrainBase,
    /// Noised-block × tuned-block accuracy matrix.
    NoiseProbe,
    /// Fine-tune every drift × selection × train_frac × seed cell.
    RunMatrix,
    /// Markdown tables from a results CSV.
    Summarize { input: Option<PathBuf> },
    /// One SVG chart per drift kind from a results CSV.
    Plot { input: Option<PathBuf> },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn results_path(out: &Path, input: &Option<PathBuf>) -> PathBuf {
    input.clone().unwrap_or_else(|| out.join(RESULTS_CSV))
}

fn run(cli: &Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(Error::Usage("--jobs must be at least 1".into()));
    }
    let out = &cli.out;
    match &cli.cmd {
        Cmd::GenData => {
            let paths = harness::cmd_gen_data(&load_config(cli)?, out)?;
            println!("wrote datasets to {}", paths.dir.display());
        }
        Cmd::TrainBase => {
            let r = harness::cmd_train_base(&load_config(cli)?, out)?;
            println!(
                "base model: source test accuracy {:.2}% after {} epochs (best {})",
                r.source_test_accuracy_pct,
                r.log.epochs.len(),
                r.log.best_epoch
            );
            for (kind, acc) in &r.target_test_accuracy_pct {
                println!("  untuned on {kind} target: {acc:.2}%");
            }
        }
        Cmd::NoiseProbe => {
            let r = harness::cmd_noise_probe(&load_config(cli)?, out, cli.jobs)?;
            print!("{}", r.to_markdown());
        }
        Cmd::RunMatrix => {
            let rows = harness::cmd_run_matrix(&load_config(cli)?, out, cli.jobs)?;
            let failed = rows.iter().filter(|r| !r.is_ok()).count();
            println!(
                "wrote {} rows to {} ({failed} not ok)",
                rows.len(),
                out.join(RESULTS_CSV).display()
            );
        }
        Cmd::Summarize { input } => {
            print!(
                "{}",
                harness::cmd_summarize(&results_path(out, input), out)?
            );
        }
        Cmd::Plot { input } => {
            for p in harness::cmd_plot(&results_path(out, input), out)? {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
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
