//! Overfit the dynamic-fusion decoder on a tiny synthetic dataset and watch
//! the composite loss fall.
//!
//! ```bash
//! cargo run -p dwff --example train_overfit
//! ```

use dwff::commands;
use dwff::config::RunConfig;

fn main() {
    let dir = std::env::temp_dir().join("dwff_train_overfit_example");
    let _ = std::fs::remove_dir_all(&dir);
    let data_dir = dir.join("data");
    let run_dir = dir.join("run");

    let cfg = RunConfig { scenes: 8, steps: 300, ..RunConfig::default() };

    commands::cmd_gen_data(&cfg, &data_dir, false).unwrap();
    println!("generated {} scenes under {}", cfg.scenes, data_dir.display());

    let summary = commands::cmd_train(&cfg, &data_dir, &run_dir).unwrap();
    println!(
        "{} optimizer steps: total loss {:.4} -> {:.4}",
        summary.steps, summary.first.total, summary.last.total
    );
    println!(
        "segmentation term {:.4} -> {:.4} ({:.1}% of initial)",
        summary.first.seg,
        summary.last.seg,
        100.0 * summary.last.seg / summary.first.seg
    );
    println!("training-set pixel accuracy: {:.4}", summary.train_accuracy);
    println!("best validation mIoU: {:.4}", summary.best_val_miou);

    // Show a few rows of the per-step log.
    let log = std::fs::read_to_string(&summary.loss_csv).unwrap();
    println!("\nloss.csv excerpt:");
    for (i, line) in log.lines().enumerate() {
        if i == 0 || i == 1 || i == 10 || i == 100 || i == 300 {
            println!("  {line}");
        }
    }
    println!("\ncheckpoints: {}", summary.final_checkpoint.display());
}
