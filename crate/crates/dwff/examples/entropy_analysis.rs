//! Collect per-image fusion weights from a trained model, relate their
//! entropy to scene diversity, and emit the histogram artifacts.
//!
//! ```bash
//! cargo run -p dwff --example entropy_analysis
//! ```

use dwff::commands;
use dwff::config::RunConfig;

fn main() {
    let dir = std::env::temp_dir().join("dwff_entropy_example");
    let _ = std::fs::remove_dir_all(&dir);
    let data_dir = dir.join("data");
    let run_dir = dir.join("run");
    let out_dir = dir.join("entropy");

    // `train` split: more records to look at.
    let cfg = RunConfig {
        scenes: 24,
        epochs: 10,
        entropy_split: "train".into(),
        ..RunConfig::default()
    };

    commands::cmd_gen_data(&cfg, &data_dir, false).unwrap();
    let train = commands::cmd_train(&cfg, &data_dir, &run_dir).unwrap();
    println!("trained {} steps, final total loss {:.4}\n", train.steps, train.last.total);

    let summary =
        commands::cmd_entropy(&cfg, &data_dir, &train.final_checkpoint, &out_dir).unwrap();

    println!("{:>4} {:>28} {:>9} {:>8}", "id", "weights (layers 1,8,16,24)", "entropy", "classes");
    for r in summary.records.iter().take(10) {
        let w: Vec<String> = r.weights.iter().map(|v| format!("{v:.3}")).collect();
        println!("{:>4} {:>28} {:>9.4} {:>8}", r.id, w.join(" "), r.entropy, r.class_count);
    }
    let max_h = (cfg.m() as f64).ln();
    println!("\nentropy range is [0, ln {} = {:.4}]", cfg.m(), max_h);

    let diversity = std::fs::read_to_string(out_dir.join("diversity.csv")).unwrap();
    println!("\nmean entropy by number of classes present:");
    for line in diversity.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let mean: f64 = f[1].parse().unwrap();
        println!("  {} classes: mean entropy {:.4} over {} images", f[0], mean, f[2]);
    }
    println!("\nartifacts in {}:", out_dir.display());
    println!("  records.csv, diversity.csv, histogram.csv, histogram.svg, weights_<id>.svg");
}
