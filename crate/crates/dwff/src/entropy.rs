//! Weight-entropy analysis: per-image fusion weights, their entropy, how
//! entropy relates to the number of classes present, and the overall
//! entropy distribution as CSV and SVG artifacts.

use thiserror::Error;

use crate::data::SceneRecord;
use crate::decoder::{self, DecoderError, DecoderParams, FusionMode};
use crate::svg;
use crate::tape::GradTape;

#[derive(Debug, Error)]
pub enum EntropyError {
    #[error("no records to analyze")]
    NoRecords,
    #[error("histogram needs at least one bin")]
    NoBins,
    #[error(transparent)]
    Decoder(#[from] DecoderError),
}

/// One image's fusion weights, their entropy, and the ground-truth class count.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRecord {
    pub id: usize,
    pub weights: Vec<f64>,
    pub entropy: f64,
    pub class_count: usize,
}

/// Entropy in nats, written out locally so the analysis path stays
/// independent of the loss implementation it is checked against.
fn entropy_of(weights: &[f64]) -> f64 {
    let mut h = 0.0;
    for &w in weights {
        if w > 0.0 {
            h -= w * w.ln();
        }
    }
    h
}

/// Runs one evaluation-mode forward pass per scene and captures the weight
/// row. Records come back ordered by scene id.
pub fn collect_records(
    params: &DecoderParams,
    mode: FusionMode,
    scenes: &[SceneRecord],
) -> Result<Vec<WeightRecord>, EntropyError> {
    let mut ordered: Vec<&SceneRecord> = scenes.iter().collect();
    ordered.sort_by_key(|s| s.id);
    let mut records = Vec::with_capacity(ordered.len());
    for scene in ordered {
        let mut tape = GradTape::new();
        let pass = decoder::forward(&mut tape, &scene.stack, params, mode)?;
        let weights = tape.value(pass.weights).data().to_vec();
        records.push(WeightRecord {
            id: scene.id,
            entropy: entropy_of(&weights),
            class_count: scene.labels.distinct_classes(),
            weights,
        });
    }
    Ok(records)
}

/// Groups records by class count: (class_count, mean entropy, population).
pub fn entropy_vs_diversity(records: &[WeightRecord]) -> Result<Vec<(usize, f64, usize)>, EntropyError> {
    if records.is_empty() {
        return Err(EntropyError::NoRecords);
    }
    let mut groups: std::collections::BTreeMap<usize, (f64, usize)> = Default::default();
    for r in records {
        let entry = groups.entry(r.class_count).or_insert((0.0, 0));
        entry.0 += r.entropy;
        entry.1 += 1;
    }
    Ok(groups.into_iter().map(|(k, (sum, n))| (k, sum / n as f64, n)).collect())
}

/// Equal-width histogram over [0, ln m]. The last bin is closed above so an
/// exactly-uniform weight row (entropy = ln m) lands inside it; all other
/// bins are half-open.
pub fn entropy_histogram(
    records: &[WeightRecord],
    bins: usize,
    m: usize,
) -> Result<Vec<usize>, EntropyError> {
    if bins == 0 {
        return Err(EntropyError::NoBins);
    }
    let upper = (m as f64).ln();
    let mut counts = vec![0usize; bins];
    for r in records {
        let frac = (r.entropy / upper).clamp(0.0, 1.0);
        let bin = ((frac * bins as f64) as usize).min(bins - 1);
        counts[bin] += 1;
    }
    Ok(counts)
}

// ── Artifact emitters ───────────────────────────────────────────────

pub fn records_csv(records: &[WeightRecord]) -> String {
    let m = records.first().map(|r| r.weights.len()).unwrap_or(0);
    let mut out = String::from("id");
    for i in 1..=m {
        out.push_str(&format!(",w{i}"));
    }
    out.push_str(",entropy,class_count\n");
    for r in records {
        out.push_str(&r.id.to_string());
        for w in &r.weights {
            out.push_str(&format!(",{w}"));
        }
        out.push_str(&format!(",{},{}\n", r.entropy, r.class_count));
    }
    out
}

pub fn diversity_csv(groups: &[(usize, f64, usize)]) -> String {
    let mut out = String::from("class_count,mean_entropy,count\n");
    for (k, mean, n) in groups {
        out.push_str(&format!("{k},{mean},{n}\n"));
    }
    out
}

pub fn histogram_csv(counts: &[usize], m: usize) -> String {
    let upper = (m as f64).ln();
    let mut out = String::from("bin_low,bin_high,count\n");
    let width = upper / counts.len() as f64;
    for (i, n) in counts.iter().enumerate() {
        out.push_str(&format!("{},{},{n}\n", i as f64 * width, (i + 1) as f64 * width));
    }
    out
}

pub fn histogram_svg(counts: &[usize], m: usize) -> String {
    let upper = (m as f64).ln();
    let width = upper / counts.len() as f64;
    let labels: Vec<String> = (0..counts.len()).map(|i| format!("{:.2}", i as f64 * width)).collect();
    let values: Vec<f64> = counts.iter().map(|&n| n as f64).collect();
    svg::bar_chart("Weight entropy distribution", "weight entropy (nats)", "images", &labels, &values)
}

/// Per-image bar chart of the m fusion weights, annotated with the entropy.
pub fn weights_svg(record: &WeightRecord, layer_ids: &[u32]) -> String {
    let labels: Vec<String> = layer_ids.iter().map(|l| format!("layer {l}")).collect();
    svg::bar_chart(
        &format!("Image {} fusion weights (entropy {:.4})", record.id, record.entropy),
        "backbone level",
        "weight",
        &labels,
        &record.weights,
    )
}
