use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use modality_lab::metrics::fmt_opt;
use modality_lab::Result;
use modality_lab_cli::commands::{
    cmd_delta_sweep, cmd_eval_grid, cmd_export_tasks, cmd_freeze_remove, cmd_probe, cmd_score, cmd_train, Written,
};
use modality_lab_cli::config::{self, ExperimentConfig, Overrides};
use modality_lab_cli::exit_code;

/// Synthetic source-modality monitoring experiments.
#[derive(Parser)]
#[command(name = "modlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config, or a manifest written by an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to analyse (default: <out>/checkpoint.ckpt).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint.ckpt and train_log.csv.
    Train(Common),
    /// Selectivity over condition x text label x target x order.
    EvalGrid(Common),
    /// Embedding separation: cosine statistics, probe and control.
    Probe(Common),
    /// Unperturbed vs remove vs freeze-remove.
    FreezeRemove(Common),
    /// Learned delta vectors across sites, depths and seeds.
    DeltaSweep(Common),
    /// Write the evaluation grid as task JSON Lines.
    ExportTasks(Common),
    /// Score a verdict JSON Lines file.
    Score {
        verdicts: PathBuf,
        /// Task file to join on id for per-condition and per-order cells.
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(c: &Common) -> Result<ExperimentConfig> {
    let ov = Overrides {
        seed: c.seed,
        out_dir: c.out.clone(),
        checkpoint: c.checkpoint.clone(),
    };
    match &c.config {
        Some(p) => config::load(p, &ov),
        None => config::resolve(ExperimentConfig::default(), &serde_json::Value::Null, &ov),
    }
}

fn report(w: &Written) {
    for p in &w.outputs {
        println!("wrote {}", p.display());
    }
    println!("manifest {}", w.manifest.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = resolve(&c)?;
            let (w, _) = cmd_train(&cfg, |r| {
                eprintln!(
                    "step {:>6}  loss {:.4}  selectivity {}  symbolic {}",
                    r.step,
                    r.train_loss,
                    fmt_opt(r.heldout_selectivity),
                    fmt_opt(r.symbolic_selectivity)
                )
            })?;
            report(&w);
        }
        Command::EvalGrid(c) => {
            let (w, rows) = cmd_eval_grid(&resolve(&c)?)?;
            let averaged = rows.iter().any(|r| r.order == "mean");
            for r in rows.iter().filter(|r| r.target == "all" && (!averaged || r.order == "mean")) {
                println!("{:<12} {:<9} {:<13} S={}", r.condition, r.text_label, r.order, fmt_opt(r.cell.selectivity));
            }
            report(&w);
        }
        Command::Probe(c) => {
            let (w, r) = cmd_probe(&resolve(&c)?)?;
            println!(
                "cross cos {:.4}  within cos {:.4}  probe {:.4}  control {:.4} (std {:.4})",
                r.cross_cos, r.within_mean_cos, r.probe_acc_mean, r.control_acc_mean, r.control_acc_std
            );
            report(&w);
        }
        Command::FreezeRemove(c) => {
            let (w, rows) = cmd_freeze_remove(&resolve(&c)?)?;
            for r in &rows {
                println!("{:<14} {:<8} S={}", r.condition, r.target, fmt_opt(r.cell.selectivity));
            }
            report(&w);
        }
        Command::DeltaSweep(c) => {
            let cfg = resolve(&c)?;
            let w = cmd_delta_sweep(&cfg, |row| eprintln!("{}", row.csv_line()))?;
            report(&w);
        }
        Command::ExportTasks(c) => {
            let (w, n) = cmd_export_tasks(&resolve(&c)?)?;
            println!("{n} tasks");
            report(&w);
        }
        Command::Score { verdicts, tasks, common } => {
            let cfg = resolve(&common)?;
            let (w, rows) = cmd_score(&cfg, &verdicts, tasks.as_deref())?;
            for r in &rows {
                println!(
                    "{:<12} {:<9} {:<8} {:<13} n={:<5} p_valid={:.6} S={}",
                    r.condition,
                    r.text_label,
                    r.target,
                    r.order,
                    r.cell.n,
                    r.cell.p_valid,
                    fmt_opt(r.cell.selectivity)
                );
            }
            report(&w);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
