//! Build a confusion matrix from noisy predictions and print the per-class
//! precision/recall/F1/IoU report with its means.
//!
//! ```bash
//! cargo run -p dwff --example metrics_report
//! ```

use dwff::data::{LabelMap, NUM_CLASSES};
use dwff::metrics::{self, ConfusionMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(99);
    let (h, w) = (64, 64);
    let truth_ids: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..NUM_CLASSES as u8)).collect();
    // Predictions agree 85% of the time, otherwise pick a random class.
    let pred_ids: Vec<u8> = truth_ids
        .iter()
        .map(|&t| {
            if rng.gen_bool(0.85) {
                t
            } else {
                rng.gen_range(0..NUM_CLASSES as u8)
            }
        })
        .collect();

    let truth = LabelMap::new([1, h, w], truth_ids, NUM_CLASSES).unwrap();
    let pred = LabelMap::new([1, h, w], pred_ids, NUM_CLASSES).unwrap();
    let mut cm = ConfusionMatrix::new(NUM_CLASSES);
    cm.accumulate(&pred, &truth).unwrap();

    let report = metrics::report(&cm);
    print!("{}", metrics::report_table(&report));
    println!("\npixel accuracy: {:.4}", cm.pixel_accuracy());
    println!("F1 and IoU are linked: F1 = 2·IoU / (1 + IoU) for hard predictions");
    let m = &report.per_class[0];
    println!(
        "  class 0: F1 {:.4} vs 2·IoU/(1+IoU) {:.4}",
        m.f1,
        2.0 * m.iou / (1.0 + m.iou)
    );
}
