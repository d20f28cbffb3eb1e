//! Check the analytic gradient of the full decoder + composite loss against
//! central differences at desk dimensions.
//!
//! ```bash
//! cargo run -p dwff --example gradcheck_decoder
//! ```

use dwff::commands;
use dwff::config::RunConfig;
use dwff::decoder::FusionMode;

fn main() {
    let cfg = RunConfig::default();
    println!(
        "decoder: m={}, c_in={}, c_fus={}, hidden={}, {} classes; batch {}",
        cfg.m(),
        cfg.c_in,
        cfg.c_fus,
        cfg.hidden,
        cfg.classes,
        cfg.gradcheck_batch
    );
    println!(
        "probing up to {} coordinates per tensor at h = {:.0e}\n",
        cfg.gradcheck_max_coords, cfg.gradcheck_step
    );

    for mode in [FusionMode::Dynamic, FusionMode::Static, FusionMode::Uniform { levels: 4 }] {
        let start = std::time::Instant::now();
        let summary = commands::gradcheck_mode(&cfg, mode).unwrap();
        println!(
            "{:<8} max relative error {:.3e} over {} coordinates in {:?}: {}",
            mode.label(),
            summary.report.max_rel_err,
            summary.report.coords_checked,
            start.elapsed(),
            if summary.passed { "PASS" } else { "FAIL" }
        );
        assert!(summary.passed);
    }
}
