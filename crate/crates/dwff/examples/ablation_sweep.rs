//! Train all six fusion variants (uniform over 1–4 deepest levels, static
//! softmax weights, dynamic per-image weights) under identical settings and
//! compare their test metrics.
//!
//! ```bash
//! cargo run -p dwff --example ablation_sweep
//! ```

use dwff::commands;
use dwff::config::RunConfig;

fn main() {
    let dir = std::env::temp_dir().join("dwff_ablation_example");
    let _ = std::fs::remove_dir_all(&dir);
    let data_dir = dir.join("data");
    let out_dir = dir.join("ablation");

    // A lighter profile than the desk default so the sweep stays snappy.
    let cfg = RunConfig { scenes: 24, epochs: 60, ..RunConfig::default() };

    commands::cmd_gen_data(&cfg, &data_dir, false).unwrap();
    println!("dataset: {} scenes, split 6:1:1\n", cfg.scenes);

    let summary = commands::cmd_ablate(&cfg, &data_dir, &out_dir).unwrap();
    println!(
        "{:<8} {:>10} {:>10} {:>10} {:>10} {:>12}",
        "method", "mPrec", "mRecall", "mF1", "mIoU", "final loss"
    );
    for row in &summary.rows {
        println!(
            "{:<8} {:>10.4} {:>10.4} {:>10.4} {:>10.4} {:>12.4}",
            row.mode.label(),
            row.report.m_precision,
            row.report.m_recall,
            row.report.m_f1,
            row.report.m_iou,
            row.final_total,
        );
    }
    println!("\ntables written to {}", out_dir.display());
    println!("  ablation.csv            method means");
    println!("  ablation_classes.csv    per-class F1/IoU, one column pair per method");
    println!("  ablation_loss.csv       final training losses");
}
