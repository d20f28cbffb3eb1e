//! Acceptance suite: one test per criterion, each printing a pass line.
//!
//! Published per-class scores of the fusion-model family serve as
//! cross-check fixtures for aggregation identities; everything else is
//! property-based against independent oracles at desk scale.

// The fixture tables are published values; some happen to sit near famous
// constants (0.7853 ≈ π/4), which is a coincidence, not an approximation.
#![allow(clippy::approx_constant)]

use std::path::Path;

use dwff::config::RunConfig;
use dwff::data::{self, FeatureStack, LabelMap};
use dwff::decoder::{self, DecoderConfig, DecoderParams, FusionMode};
use dwff::loss::{self, LossConfig};
use dwff::metrics::{self, ClassMetrics, ConfusionMatrix};
use dwff::optim::{self, cosine_lr, OptimConfig, OptimizerState};
use dwff::tape::GradTape;
use dwff::tensor::{row_entropy, softmax_temperature, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

// ── Reference fixtures ──────────────────────────────────────────────
// (F1, IoU) per class, row order: Asg, Dl, Gb, St, Dr, Pr, Fb, Wa, Ul,
// Pf, Ridge, Cl, River, Tf, Water.

const UNET: [(f64, f64); 15] = [
    (0.5958, 0.4243),
    (0.9754, 0.9521),
    (0.5597, 0.3886),
    (0.0008, 0.0004),
    (0.7783, 0.6370),
    (0.9057, 0.8276),
    (0.7585, 0.6109),
    (0.8469, 0.7345),
    (0.7714, 0.6279),
    (0.9732, 0.9477),
    (0.0000, 0.0000),
    (0.8864, 0.7960),
    (0.7013, 0.5400),
    (0.6895, 0.5262),
    (0.8554, 0.7473),
];

const DEEPLAB: [(f64, f64); 15] = [
    (0.6645, 0.4975),
    (0.9813, 0.9632),
    (0.6271, 0.4568),
    (0.3867, 0.2397),
    (0.7681, 0.6236),
    (0.8907, 0.8029),
    (0.8065, 0.6757),
    (0.8797, 0.7853),
    (0.7749, 0.6326),
    (0.9698, 0.9414),
    (0.7769, 0.6353),
    (0.9013, 0.8204),
    (0.7160, 0.5577),
    (0.6234, 0.4529),
    (0.8259, 0.7034),
];

const NWFF1: [(f64, f64); 15] = [
    (0.6005, 0.4291),
    (0.9831, 0.9667),
    (0.6426, 0.4734),
    (0.3604, 0.2198),
    (0.8243, 0.7011),
    (0.9071, 0.8300),
    (0.8261, 0.7038),
    (0.8639, 0.7605),
    (0.7727, 0.6296),
    (0.9854, 0.9711),
    (0.7908, 0.6540),
    (0.9061, 0.8283),
    (0.7713, 0.6278),
    (0.7069, 0.5467),
    (0.8906, 0.8027),
];

const NWFF2: [(f64, f64); 15] = [
    (0.6273, 0.4570),
    (0.9833, 0.9671),
    (0.6457, 0.4768),
    (0.3781, 0.2331),
    (0.8233, 0.6997),
    (0.9075, 0.8306),
    (0.8235, 0.6999),
    (0.8635, 0.7597),
    (0.7831, 0.6436),
    (0.9861, 0.9726),
    (0.7978, 0.6637),
    (0.9064, 0.8288),
    (0.8186, 0.6928),
    (0.6541, 0.4860),
    (0.9214, 0.8543),
];

const NWFF3: [(f64, f64); 15] = [
    (0.6246, 0.4541),
    (0.9838, 0.9681),
    (0.6570, 0.4892),
    (0.3189, 0.1897),
    (0.8235, 0.6999),
    (0.9182, 0.8487),
    (0.8142, 0.6866),
    (0.8726, 0.7741),
    (0.7787, 0.6376),
    (0.9858, 0.9721),
    (0.7890, 0.6515),
    (0.9086, 0.8325),
    (0.7615, 0.6149),
    (0.6470, 0.4782),
    (0.8813, 0.7877),
];

const NWFF4: [(f64, f64); 15] = [
    (0.6358, 0.4660),
    (0.9842, 0.9689),
    (0.6322, 0.4622),
    (0.3057, 0.1804),
    (0.8145, 0.6871),
    (0.9092, 0.8336),
    (0.8166, 0.6900),
    (0.8703, 0.7703),
    (0.7774, 0.6358),
    (0.9863, 0.9730),
    (0.7908, 0.6540),
    (0.9105, 0.8357),
    (0.8160, 0.6892),
    (0.6472, 0.4784),
    (0.9083, 0.8320),
];

const SWFF: [(f64, f64); 15] = [
    (0.6181, 0.4473),
    (0.9841, 0.9687),
    (0.6391, 0.4696),
    (0.3059, 0.1806),
    (0.8262, 0.7038),
    (0.9121, 0.8384),
    (0.8330, 0.7138),
    (0.8647, 0.7616),
    (0.7807, 0.6403),
    (0.9865, 0.9733),
    (0.8029, 0.6707),
    (0.9112, 0.8368),
    (0.8299, 0.7092),
    (0.6643, 0.4974),
    (0.9287, 0.8668),
];

const DWFF: [(f64, f64); 15] = [
    (0.6040, 0.4326),
    (0.9839, 0.9682),
    (0.6222, 0.4516),
    (0.4261, 0.2707),
    (0.8175, 0.6913),
    (0.9098, 0.8345),
    (0.8241, 0.7008),
    (0.8595, 0.7537),
    (0.7825, 0.6427),
    (0.9869, 0.9741),
    (0.8127, 0.6846),
    (0.9088, 0.8328),
    (0.8653, 0.7626),
    (0.7175, 0.5594),
    (0.9523, 0.9090),
];

/// Published (mF1, mIoU) means per fusion variant.
const VARIANT_MEANS: [(&str, f64, f64); 6] = [
    ("nwff-1", 0.7888, 0.6763),
    ("nwff-2", 0.7946, 0.6844),
    ("nwff-3", 0.7843, 0.6723),
    ("nwff-4", 0.787, 0.6771),
    ("swff", 0.7925, 0.6852),
    ("dwff", 0.8049, 0.6979),
];

fn column_means(rows: &[(f64, f64); 15]) -> (f64, f64) {
    let per_class: Vec<ClassMetrics> = rows
        .iter()
        .map(|&(f1, iou)| ClassMetrics { precision: 0.0, recall: 0.0, f1, iou })
        .collect();
    let report = metrics::mean_metrics(&per_class, 15).unwrap();
    (report.m_f1, report.m_iou)
}

#[test]
fn criterion_01_reference_table_aggregation() {
    let variant_rows: [&[(f64, f64); 15]; 6] = [&NWFF1, &NWFF2, &NWFF3, &NWFF4, &SWFF, &DWFF];
    for (rows, (name, want_f1, want_iou)) in variant_rows.iter().zip(VARIANT_MEANS) {
        let (m_f1, m_iou) = column_means(rows);
        assert!(
            (m_f1 - want_f1).abs() < 5e-4,
            "{name}: mF1 {m_f1} vs published {want_f1}"
        );
        assert!(
            (m_iou - want_iou).abs() < 5e-4,
            "{name}: mIoU {m_iou} vs published {want_iou}"
        );
    }
    println!("acceptance 01 reference-table-aggregation: PASS");
}

#[test]
fn criterion_02_dice_iou_relation() {
    // Published pairs: F1 = 2·IoU/(1+IoU) up to table rounding.
    let mut checked = 0;
    for table in [&UNET, &DEEPLAB, &DWFF] {
        for &(f1, iou) in table.iter() {
            if f1 == 0.0 && iou == 0.0 {
                checked += 1;
                continue;
            }
            let derived = 2.0 * iou / (1.0 + iou);
            assert!(
                (f1 - derived).abs() < 2e-3,
                "pair ({f1}, {iou}): derived {derived}"
            );
            checked += 1;
        }
    }
    assert_eq!(checked, 45);

    // Implementation route: per-class dice coefficients at ε→0 versus IoU
    // from the confusion matrix, on random hard masks.
    let mut rng = ChaCha20Rng::seed_from_u64(2202);
    let classes = 5;
    for _ in 0..100 {
        let h = rng.gen_range(3..7usize);
        let w = rng.gen_range(3..7usize);
        let truth_ids: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..classes as u8)).collect();
        let pred_ids: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..classes as u8)).collect();
        let truth = LabelMap::new([1, h, w], truth_ids.clone(), classes).unwrap();
        let pred = LabelMap::new([1, h, w], pred_ids.clone(), classes).unwrap();

        let mut one_hot = vec![0.0; classes * h * w];
        for (p, &id) in pred_ids.iter().enumerate() {
            one_hot[id as usize * h * w + p] = 1.0;
        }
        let mut tape = GradTape::new();
        let probs = tape.constant(Tensor::new(vec![1, classes, h, w], one_hot).unwrap());
        let coeffs = loss::dice_coefficients(&mut tape, probs, &truth, 0.0).unwrap();
        let coeffs = tape.value(coeffs).data().to_vec();

        let mut cm = ConfusionMatrix::new(classes);
        cm.accumulate(&pred, &truth).unwrap();
        for (c, &coeff) in coeffs.iter().enumerate() {
            let m = metrics::class_metrics(&cm, c);
            let support = cm.count(c, c) > 0
                || (0..classes).any(|o| cm.count(o, c) > 0 || cm.count(c, o) > 0);
            if support {
                let derived = 2.0 * m.iou / (1.0 + m.iou);
                assert!(
                    (coeff - derived).abs() < 1e-9,
                    "class {c}: dice {coeff} vs 2IoU/(1+IoU) {derived}"
                );
            }
        }
    }
    println!("acceptance 02 dice-iou-relation: PASS");
}

#[test]
fn criterion_03_full_model_gradient_check() {
    let cfg = RunConfig::default();
    let start = std::time::Instant::now();
    let dynamic = dwff::commands::gradcheck_mode(&cfg, FusionMode::Dynamic).unwrap();
    assert!(
        dynamic.passed,
        "dynamic mode max rel err {}",
        dynamic.report.max_rel_err
    );
    let fixed = dwff::commands::gradcheck_mode(&cfg, FusionMode::Static).unwrap();
    assert!(fixed.passed, "static mode max rel err {}", fixed.report.max_rel_err);
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 120, "took {elapsed:?}");
    println!(
        "acceptance 03 gradient-correctness: PASS (dwff {:.2e}, swff {:.2e}, {:?})",
        dynamic.report.max_rel_err, fixed.report.max_rel_err, elapsed
    );
}

#[test]
fn criterion_04_weight_distribution_invariants() {
    let mut rng = ChaCha20Rng::seed_from_u64(404);
    let temps = [0.1, 1.0, 10.0];
    for _ in 0..10_000 {
        let scores: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
        // Uniform f64 draws collide with probability ~0; regenerating keeps
        // the strictness claims meaningful.
        let distinct = scores
            .iter()
            .enumerate()
            .all(|(i, a)| scores.iter().skip(i + 1).all(|b| (a - b).abs() > 1e-9));
        if !distinct {
            continue;
        }
        let argmax_scores = argmax(&scores);
        let mut previous_entropy = -1.0;
        for &t in &temps {
            let w = softmax_temperature(&scores, 1, 4, t).unwrap();
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "sum {sum} at temp {t}");
            let h = row_entropy(&w);
            assert!((0.0..=4.0f64.ln() + 1e-12).contains(&h), "entropy {h}");
            assert!(h > previous_entropy, "entropy not increasing: {h} after {previous_entropy}");
            previous_entropy = h;
            assert_eq!(argmax(&w), argmax_scores, "argmax moved at temp {t}");
        }
    }
    println!("acceptance 04 weight-distribution-invariants: PASS");
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[test]
fn criterion_05_mode_reductions_bit_identical() {
    let cfg = DecoderConfig { m: 4, c_in: 8, c_fus: 16, hidden: 8, groups: 4, classes: 5, learn_temp: true };
    let mut params = DecoderParams::init(&cfg, 55);
    *params.get_mut("mlp.w1") = Tensor::zeros(vec![cfg.hidden, cfg.m * cfg.c_fus]);
    *params.get_mut("mlp.b1") = Tensor::zeros(vec![cfg.hidden]);
    *params.get_mut("mlp.w2") = Tensor::zeros(vec![cfg.m, cfg.hidden]);
    *params.get_mut("mlp.b2") = Tensor::zeros(vec![cfg.m]);
    *params.get_mut("static_logits") = Tensor::full(vec![1, cfg.m], 0.7);

    let mut rng = ChaCha20Rng::seed_from_u64(505);
    for batch_idx in 0..20 {
        let batch = 1 + batch_idx % 3;
        let levels: Vec<Tensor> = (0..cfg.m)
            .map(|_| {
                let data: Vec<f64> =
                    (0..batch * cfg.c_in * 36).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Tensor::new(vec![batch, cfg.c_in, 6, 6], data).unwrap()
            })
            .collect();
        let stack = FeatureStack::new(levels, vec![1, 8, 16, 24]).unwrap();
        let run = |mode: FusionMode| {
            let mut tape = GradTape::new();
            let pass = decoder::forward(&mut tape, &stack, &params, mode).unwrap();
            tape.value(pass.logits).data().to_vec()
        };
        let dynamic = run(FusionMode::Dynamic);
        let fixed = run(FusionMode::Static);
        let uniform = run(FusionMode::Uniform { levels: 4 });
        assert_eq!(dynamic, fixed, "batch {batch_idx}: dynamic vs static");
        assert_eq!(dynamic, uniform, "batch {batch_idx}: dynamic vs uniform");
    }
    println!("acceptance 05 mode-reductions: PASS");
}

#[test]
fn criterion_06_loss_oracles() {
    let mut rng = ChaCha20Rng::seed_from_u64(606);
    let cfg = LossConfig::default();
    for case in 0..200 {
        let b = 1 + case % 2;
        let c = 2 + case % 4;
        let h = 2 + case % 3;
        let w = 2 + (case + 1) % 3;
        let pixels = h * w;

        // Random normalized probabilities and labels.
        let mut probs = vec![0.0; b * c * pixels];
        for bi in 0..b {
            for p in 0..pixels {
                let raw: Vec<f64> = (0..c).map(|_| rng.gen_range(0.05..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                for (ci, &r) in raw.iter().enumerate() {
                    probs[(bi * c + ci) * pixels + p] = r / sum;
                }
            }
        }
        let ids: Vec<u8> = (0..b * pixels).map(|_| rng.gen_range(0..c as u8)).collect();
        let labels = LabelMap::new([b, h, w], ids.clone(), c).unwrap();

        let mut tape = GradTape::new();
        let probs_id = tape.constant(Tensor::new(vec![b, c, h, w], probs.clone()).unwrap());

        // Dice against an explicit per-class loop.
        let eps = if case % 2 == 0 { 1.0 } else { 0.5 };
        let dice = loss::dice_loss(&mut tape, probs_id, &labels, eps).unwrap();
        let dice = tape.value(dice).data()[0];
        let mut oracle_dice = 0.0;
        for ci in 0..c {
            let mut inter = 0.0;
            let mut psum = 0.0;
            let mut ysum = 0.0;
            for bi in 0..b {
                for p in 0..pixels {
                    let pv = probs[(bi * c + ci) * pixels + p];
                    let yv = if ids[bi * pixels + p] as usize == ci { 1.0 } else { 0.0 };
                    inter += pv * yv;
                    psum += pv;
                    ysum += yv;
                }
            }
            oracle_dice += 1.0 - (2.0 * inter + eps) / (psum + ysum + eps);
        }
        oracle_dice /= c as f64;
        assert!((dice - oracle_dice).abs() < 1e-10, "dice {dice} vs {oracle_dice}");

        // Focal against a per-pixel loop.
        let focal = loss::focal_loss(&mut tape, probs_id, &labels, cfg.gamma, cfg.alpha_t).unwrap();
        let focal = tape.value(focal).data()[0];
        let mut oracle_focal = 0.0;
        for bi in 0..b {
            for p in 0..pixels {
                let pt = probs[(bi * c + ids[bi * pixels + p] as usize) * pixels + p].max(1e-7);
                oracle_focal += -cfg.alpha_t * (1.0 - pt).powf(cfg.gamma) * pt.ln();
            }
        }
        oracle_focal /= (b * pixels) as f64;
        assert!((focal - oracle_focal).abs() < 1e-10, "focal {focal} vs {oracle_focal}");

        // Entropy against a per-row loop.
        let m = 4;
        let mut wdata = vec![0.0; b * m];
        for bi in 0..b {
            let raw: Vec<f64> = (0..m).map(|_| rng.gen_range(0.01..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            for (i, &r) in raw.iter().enumerate() {
                wdata[bi * m + i] = r / sum;
            }
        }
        let weights_id = tape.constant(Tensor::new(vec![b, m], wdata.clone()).unwrap());
        let ent = loss::weight_entropy_loss(&mut tape, weights_id).unwrap();
        let ent = tape.value(ent).data()[0];
        let mut oracle_ent = 0.0;
        for bi in 0..b {
            for i in 0..m {
                let v = wdata[bi * m + i];
                oracle_ent += -v * v.ln();
            }
        }
        oracle_ent /= b as f64;
        assert!((ent - oracle_ent).abs() < 1e-10, "entropy {ent} vs {oracle_ent}");

        // L2 against a flat sum.
        let wm: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wmat = tape.param("w", Tensor::new(vec![2, 3], wm.clone()).unwrap());
        let l2 = loss::l2_loss(&mut tape, &[wmat]).unwrap();
        let l2 = tape.value(l2).data()[0];
        let oracle_l2: f64 = wm.iter().map(|v| v * v).sum();
        assert!((l2 - oracle_l2).abs() < 1e-10, "l2 {l2} vs {oracle_l2}");

        // Total composes with the published coefficients.
        let (breakdown, _) =
            loss::total_loss(&mut tape, probs_id, &labels, weights_id, &[wmat], &cfg).unwrap();
        let recomposed = breakdown.seg + 0.04 * breakdown.l2 - 0.01 * breakdown.entropy;
        assert!((breakdown.total - recomposed).abs() < 1e-12);
        assert!(
            (breakdown.seg - (0.5 * breakdown.dice + 0.5 * breakdown.focal)).abs() < 1e-12
        );
    }
    println!("acceptance 06 loss-oracles: PASS");
}

#[test]
fn criterion_07_metrics_oracle() {
    let mut rng = ChaCha20Rng::seed_from_u64(707);
    for _ in 0..500 {
        let classes = rng.gen_range(2..8usize);
        let h = rng.gen_range(2..9usize);
        let w = rng.gen_range(2..9usize);
        let truth_ids: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..classes as u8)).collect();
        let pred_ids: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..classes as u8)).collect();
        let truth = LabelMap::new([1, h, w], truth_ids.clone(), classes).unwrap();
        let pred = LabelMap::new([1, h, w], pred_ids.clone(), classes).unwrap();
        let mut cm = ConfusionMatrix::new(classes);
        cm.accumulate(&pred, &truth).unwrap();

        // Brute-force recount.
        for c in 0..classes {
            let mut tp = 0u64;
            let mut fp = 0u64;
            let mut fun = 0u64;
            for p in 0..h * w {
                let t = truth_ids[p] as usize;
                let pr = pred_ids[p] as usize;
                if t == c && pr == c {
                    tp += 1;
                } else if t != c && pr == c {
                    fp += 1;
                } else if t == c && pr != c {
                    fun += 1;
                }
            }
            let m = metrics::class_metrics(&cm, c);
            let expect_p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let expect_r = if tp + fun == 0 { 0.0 } else { tp as f64 / (tp + fun) as f64 };
            let expect_iou =
                if tp + fp + fun == 0 { 0.0 } else { tp as f64 / (tp + fp + fun) as f64 };
            assert_eq!(m.precision, expect_p);
            assert_eq!(m.recall, expect_r);
            assert_eq!(m.iou, expect_iou);
        }

        // Permutation invariance of the means, exactly.
        let report = metrics::report(&cm);
        let mut perm: Vec<u8> = (0..classes as u8).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let relabel = |ids: &[u8]| -> Vec<u8> { ids.iter().map(|&v| perm[v as usize]).collect() };
        let truth_p = LabelMap::new([1, h, w], relabel(&truth_ids), classes).unwrap();
        let pred_p = LabelMap::new([1, h, w], relabel(&pred_ids), classes).unwrap();
        let mut cm_p = ConfusionMatrix::new(classes);
        cm_p.accumulate(&pred_p, &truth_p).unwrap();
        let report_p = metrics::report(&cm_p);
        assert_eq!(report.m_precision, report_p.m_precision);
        assert_eq!(report.m_recall, report_p.m_recall);
        assert_eq!(report.m_f1, report_p.m_f1);
        assert_eq!(report.m_iou, report_p.m_iou);
        // And per-class reports permute along.
        for (c, &target) in perm.iter().enumerate() {
            assert_eq!(report.per_class[c], report_p.per_class[target as usize]);
        }
    }
    println!("acceptance 07 metrics-oracle: PASS");
}

#[test]
fn criterion_08_overfit_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let run_dir = dir.path().join("run");
    let cfg =
        RunConfig { scenes: 8, steps: 300, mode: FusionMode::Dynamic, ..RunConfig::default() };
    cfg.validate().unwrap();

    let start = std::time::Instant::now();
    dwff::commands::cmd_gen_data(&cfg, &data_dir, false).unwrap();
    let summary = dwff::commands::cmd_train(&cfg, &data_dir, &run_dir).unwrap();
    let elapsed = start.elapsed();

    assert_eq!(summary.steps, 300);
    assert!(
        summary.last.seg < 0.1 * summary.first.seg,
        "seg {} vs initial {}",
        summary.last.seg,
        summary.first.seg
    );
    assert!(summary.train_accuracy > 0.95, "train accuracy {}", summary.train_accuracy);
    assert!(elapsed.as_secs() < 300, "took {elapsed:?}");
    println!(
        "acceptance 08 overfit-smoke: PASS (seg {:.4} -> {:.4}, accuracy {:.4}, {:?})",
        summary.first.seg, summary.last.seg, summary.train_accuracy, elapsed
    );
}

#[test]
fn criterion_09_ablation_harness() {
    let dir = tempfile::tempdir().unwrap();
    let data_dir = dir.path().join("data");
    let out_dir = dir.path().join("ablation");
    let cfg = RunConfig::default(); // 80 scenes, 20 epochs
    let gen = dwff::commands::cmd_gen_data(&cfg, &data_dir, false).unwrap();
    assert_eq!((gen.train, gen.val, gen.test), (60, 10, 10));
    let summary = dwff::commands::cmd_ablate(&cfg, &data_dir, &out_dir).unwrap();
    assert_eq!(summary.rows.len(), 6);

    // The headline table has exactly the six variants in order.
    let table = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 7);
    for (line, (name, _, _)) in lines[1..].iter().zip(VARIANT_MEANS) {
        assert!(line.starts_with(name), "row {line} vs {name}");
    }

    // Every variant's reported means recompute from its per-class CSV.
    for row in &summary.rows {
        let per_class = parse_metrics_csv(&out_dir.join(row.mode.label()).join("metrics.csv"));
        let recomputed = metrics::mean_metrics(&per_class, cfg.classes).unwrap();
        let reported = parse_means_row(&out_dir.join(row.mode.label()).join("metrics.csv"));
        assert!((recomputed.m_precision - reported.0).abs() < 1e-12);
        assert!((recomputed.m_recall - reported.1).abs() < 1e-12);
        assert!((recomputed.m_f1 - reported.2).abs() < 1e-12);
        assert!((recomputed.m_iou - reported.3).abs() < 1e-12);
        // And the headline table repeats the same means.
        assert!((row.report.m_f1 - recomputed.m_f1).abs() < 1e-12);
        assert!((row.report.m_iou - recomputed.m_iou).abs() < 1e-12);
    }

    // Directional check: dynamic fusion should not end above the single-level
    // baseline on the same seed. Mirrors a demonstrated-but-not-guaranteed
    // training property, so a violation flags rather than fails.
    let dynamic = summary.rows.iter().find(|r| r.mode == FusionMode::Dynamic).unwrap();
    let single = summary
        .rows
        .iter()
        .find(|r| r.mode == (FusionMode::Uniform { levels: 1 }))
        .unwrap();
    if dynamic.final_total <= single.final_total {
        println!(
            "acceptance 09 ablation-harness: PASS (dwff {:.4} <= nwff-1 {:.4})",
            dynamic.final_total, single.final_total
        );
    } else {
        println!(
            "acceptance 09 ablation-harness: PASS with FLAG (dwff {:.4} > nwff-1 {:.4}; investigate)",
            dynamic.final_total, single.final_total
        );
    }
}

fn parse_metrics_csv(path: &Path) -> Vec<ClassMetrics> {
    let body = std::fs::read_to_string(path).unwrap();
    body.lines()
        .skip(1)
        .filter(|l| !l.starts_with("mean"))
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            ClassMetrics {
                precision: f[2].parse().unwrap(),
                recall: f[3].parse().unwrap(),
                f1: f[4].parse().unwrap(),
                iou: f[5].parse().unwrap(),
            }
        })
        .collect()
}

fn parse_means_row(path: &Path) -> (f64, f64, f64, f64) {
    let body = std::fs::read_to_string(path).unwrap();
    let line = body.lines().find(|l| l.starts_with("mean")).unwrap();
    let f: Vec<&str> = line.split(',').collect();
    (f[2].parse().unwrap(), f[3].parse().unwrap(), f[4].parse().unwrap(), f[5].parse().unwrap())
}

#[test]
fn criterion_10_determinism_and_format() {
    // Two full gen-data + train + eval pipelines, byte-compared.
    let cfg = RunConfig { scenes: 16, epochs: 4, ..RunConfig::default() };
    cfg.validate().unwrap();

    let run_pipeline = |root: &Path| {
        let data_dir = root.join("data");
        let train_dir = root.join("train");
        let eval_dir = root.join("eval");
        dwff::commands::cmd_gen_data(&cfg, &data_dir, false).unwrap();
        dwff::commands::cmd_train(&cfg, &data_dir, &train_dir).unwrap();
        dwff::commands::cmd_eval(
            &cfg,
            &data_dir,
            &train_dir.join("checkpoint_final.dwfc"),
            &eval_dir,
        )
        .unwrap();
        (
            std::fs::read(train_dir.join("loss.csv")).unwrap(),
            std::fs::read(eval_dir.join("metrics.csv")).unwrap(),
            std::fs::read(data_dir.join("train/0/label.dwf"))
                .or_else(|_| std::fs::read(data_dir.join("val/0/label.dwf")))
                .or_else(|_| std::fs::read(data_dir.join("test/0/label.dwf")))
                .unwrap(),
        )
    };
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let (loss_a, metrics_a, label_a) = run_pipeline(dir_a.path());
    let (loss_b, metrics_b, label_b) = run_pipeline(dir_b.path());
    assert_eq!(loss_a, loss_b, "loss CSVs differ across identical runs");
    assert_eq!(metrics_a, metrics_b, "metric CSVs differ across identical runs");
    assert_eq!(label_a, label_b, "dataset bytes differ across identical runs");

    // 1000 random tensors survive the DWF1 round trip bit-exactly.
    let mut rng = ChaCha20Rng::seed_from_u64(1010);
    for _ in 0..1000 {
        let rank = rng.gen_range(1..4usize);
        let shape: Vec<usize> = (0..rank).map(|_| rng.gen_range(1..5usize)).collect();
        let n: usize = shape.iter().product();
        // Values generated at f32 precision so float32 storage is lossless.
        let data: Vec<f64> = (0..n).map(|_| rng.gen::<f32>() as f64 * 8.0 - 4.0).collect();
        let data: Vec<f64> = data.iter().map(|&v| v as f32 as f64).collect();
        let t = Tensor::new(shape, data).unwrap();
        let bytes = dwff::io::encode_tensor_f32(&t).unwrap();
        let (back, consumed) = dwff::io::decode_tensor(&bytes).unwrap();
        assert_eq!(consumed, bytes.len());
        assert_eq!(back, t);
        assert_eq!(dwff::io::encode_tensor_f32(&back).unwrap(), bytes);
    }
    println!("acceptance 10 determinism-and-format: PASS");
}

#[test]
fn criterion_11_optimizer_and_schedule() {
    // Cosine endpoints and midpoint, exactly.
    let (hi, lo) = (2e-2, 1e-5);
    assert_eq!(cosine_lr(0, 100, hi, lo), hi);
    assert_eq!(cosine_lr(100, 100, hi, lo), lo);
    assert_eq!(cosine_lr(50, 100, hi, lo), 0.5 * hi + 0.5 * lo);

    // Hand-computed first AdamW step to 1e-12.
    let mut state = OptimizerState::new(&[1]);
    let mut theta = Tensor::scalar(0.0);
    let names = vec!["w".to_string()];
    let ocfg = OptimConfig::default();
    optim::adamw_step(&mut state, &names, &mut [&mut theta], &[vec![1.0]], 0.1, &ocfg).unwrap();
    let expect = -0.1 * (1.0 / (1.0 + 1e-8));
    assert!((theta.data()[0] - expect).abs() < 1e-12);

    // Accumulation invariance: (A=2, micro 2) equals (A=1, micro 4) after
    // one step, for a loss linear in batch means (dice disabled).
    let mut cfg = RunConfig::default();
    cfg.loss = dwff::loss::LossConfig { alpha: 0.0, beta: 1.0, ..cfg.loss };
    let dcfg = DecoderConfig { m: 3, c_in: 6, c_fus: 8, hidden: 6, groups: 2, classes: 4, learn_temp: true };
    let backbone = data::SurrogateBackbone::new(3, dcfg.c_in, 2, dcfg.m);
    let scenes: Vec<(FeatureStack, LabelMap)> = (0..4)
        .map(|i| {
            let (image, labels) =
                data::generate_scene_pooled(100 + i, 6, 6, 3, 2, 0.05, dcfg.classes).unwrap();
            (backbone.extract(&image, &[1, 2, 3]).unwrap(), labels)
        })
        .collect();
    let params0 = DecoderParams::init(&dcfg, 77);
    let trainable = params0.trainable_names(FusionMode::Dynamic);
    let sizes: Vec<usize> = trainable.iter().map(|n| params0.get(n).len()).collect();

    let grads_of = |stack: &FeatureStack, labels: &LabelMap| -> Vec<Vec<f64>> {
        let mut tape = GradTape::new();
        let pass = decoder::forward(&mut tape, stack, &params0, FusionMode::Dynamic).unwrap();
        let probs = tape.softmax_channels(pass.logits).unwrap();
        let (_, total) = loss::total_loss(
            &mut tape,
            probs,
            labels,
            pass.weights,
            &pass.weight_matrices,
            &cfg.loss,
        )
        .unwrap();
        tape.backward(total);
        pass.params.iter().map(|(_, id)| tape.grad(*id).unwrap().to_vec()).collect()
    };

    // Path A: two micro-batches of 2, averaged.
    let mut acc = optim::GradAccumulator::new(&sizes);
    for half in scenes.chunks(2) {
        let stacks: Vec<&FeatureStack> = half.iter().map(|(s, _)| s).collect();
        let labels: Vec<&LabelMap> = half.iter().map(|(_, l)| l).collect();
        acc.add(&grads_of(&FeatureStack::stack(&stacks), &LabelMap::stack(&labels)));
    }
    let mean_a = acc.take_mean();
    // Path B: one batch of 4.
    let stacks: Vec<&FeatureStack> = scenes.iter().map(|(s, _)| s).collect();
    let labels: Vec<&LabelMap> = scenes.iter().map(|(_, l)| l).collect();
    let grads_b = grads_of(&FeatureStack::stack(&stacks), &LabelMap::stack(&labels));

    let step = |grads: &[Vec<f64>]| -> DecoderParams {
        let mut p = params0.clone();
        let mut s = OptimizerState::new(&sizes);
        optim::adamw_step_params(&mut s, &mut p, &trainable, grads, 0.01, &cfg.optim).unwrap();
        p
    };
    let pa = step(&mean_a);
    let pb = step(&grads_b);
    for name in &trainable {
        for (a, b) in pa.get(name).data().iter().zip(pb.get(name).data()) {
            assert!((a - b).abs() < 1e-10, "{name}: {a} vs {b}");
        }
    }
    println!("acceptance 11 optimizer-and-schedule: PASS");
}
