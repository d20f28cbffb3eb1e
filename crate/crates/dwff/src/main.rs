//! Thin CLI over the library commands.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dwff::commands::{self, RunError};
use dwff::config::RunConfig;

#[derive(Parser)]
#[command(name = "dwff", version, about = "Dynamic-weighted feature fusion lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Plain-text config (`key = value` lines); defaults to the desk profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic DWF1 dataset with train/val/test manifests.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Overwrite an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train the configured fusion variant; writes loss.csv and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (defaults to `data.dir` from the config).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate all six fusion variants under identical settings.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the configured split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint file (defaults to `eval.checkpoint` from the config).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit the weight-entropy analysis artifacts for a checkpoint.
    Entropy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the full model + loss gradient against central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, RunError> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::GenData { common, out, force } => {
            let cfg = load_config(&common)?;
            let summary = commands::cmd_gen_data(&cfg, &out, force)?;
            println!(
                "wrote {} scenes to {} (train {}, val {}, test {})",
                cfg.scenes,
                out.display(),
                summary.train,
                summary.val,
                summary.test
            );
        }
        Command::Train { common, data, out } => {
            let cfg = load_config(&common)?;
            let data_dir = data.unwrap_or_else(|| cfg.data_dir.clone());
            let summary = commands::cmd_train(&cfg, &data_dir, &out)?;
            println!(
                "trained {} for {} steps: total {:.6} -> {:.6}, best val mIoU {:.4}, train accuracy {:.4}",
                cfg.mode, summary.steps, summary.first.total, summary.last.total,
                summary.best_val_miou, summary.train_accuracy
            );
            println!("loss log: {}", summary.loss_csv.display());
            println!("checkpoints: {} / {}", summary.final_checkpoint.display(), summary.best_checkpoint.display());
        }
        Command::Ablate { common, data, out } => {
            let cfg = load_config(&common)?;
            let data_dir = data.unwrap_or_else(|| cfg.data_dir.clone());
            let summary = commands::cmd_ablate(&cfg, &data_dir, &out)?;
            println!("{:<8} {:>10} {:>10} {:>10} {:>10}", "method", "mPrec", "mRecall", "mF1", "mIoU");
            for row in &summary.rows {
                println!(
                    "{:<8} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
                    row.mode.label(),
                    row.report.m_precision,
                    row.report.m_recall,
                    row.report.m_f1,
                    row.report.m_iou
                );
            }
            println!("tables: {}", out.display());
        }
        Command::Eval { common, data, checkpoint, out } => {
            let cfg = load_config(&common)?;
            let data_dir = data.unwrap_or_else(|| cfg.data_dir.clone());
            let ckpt = checkpoint.unwrap_or_else(|| cfg.eval_checkpoint.clone());
            let report = commands::cmd_eval(&cfg, &data_dir, &ckpt, &out)?;
            println!(
                "split {}: mPrecision {:.4}, mRecall {:.4}, mF1 {:.4}, mIoU {:.4}",
                cfg.eval_split, report.m_precision, report.m_recall, report.m_f1, report.m_iou
            );
            println!("report: {}", out.join("metrics.csv").display());
        }
        Command::Entropy { common, data, checkpoint, out } => {
            let cfg = load_config(&common)?;
            let data_dir = data.unwrap_or_else(|| cfg.data_dir.clone());
            let ckpt = checkpoint.unwrap_or_else(|| cfg.eval_checkpoint.clone());
            let summary = commands::cmd_entropy(&cfg, &data_dir, &ckpt, &out)?;
            println!(
                "collected {} weight records; histogram over {} bins written to {}",
                summary.records.len(),
                summary.histogram.len(),
                out.display()
            );
        }
        Command::Gradcheck { common } => {
            let cfg = load_config(&common)?;
            let summary = commands::cmd_gradcheck(&cfg)?;
            println!(
                "max relative error {:.3e} over {} coordinates: {}",
                summary.report.max_rel_err,
                summary.report.coords_checked,
                if summary.passed { "PASS" } else { "FAIL" }
            );
            if !summary.passed {
                return Err(RunError::GradCheckFailed { max_rel_err: summary.report.max_rel_err });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are success, anything else is usage.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}
