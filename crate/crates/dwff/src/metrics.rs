//! Confusion-matrix evaluation: per-class precision, recall, F1, IoU and
//! their unweighted means over all classes.
//!
//! Every 0/0 ratio resolves to 0 — an undetected class scores zero and
//! still enters the 15-way means, it is never excluded.

use thiserror::Error;

use crate::data::{class_abbrev, LabelMap};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction shaped {pred:?} does not match truth {truth:?}")]
    ShapeMismatch { pred: [usize; 3], truth: [usize; 3] },
    #[error("class id {id} out of range for {classes} classes")]
    ClassOutOfRange { id: u8, classes: usize },
    #[error("expected {expected} per-class reports, got {got}")]
    WrongClassCount { expected: usize, got: usize },
}

/// counts[truth][pred], accumulated over batches.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<(), MetricsError> {
        if pred.shape() != truth.shape() {
            return Err(MetricsError::ShapeMismatch { pred: pred.shape(), truth: truth.shape() });
        }
        for (&p, &t) in pred.ids().iter().zip(truth.ids()) {
            if p as usize >= self.classes {
                return Err(MetricsError::ClassOutOfRange { id: p, classes: self.classes });
            }
            if t as usize >= self.classes {
                return Err(MetricsError::ClassOutOfRange { id: t, classes: self.classes });
            }
            self.counts[t as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Batch matrices merge additively; order never matters.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.classes).map(|c| self.count(c, c)).sum();
        diag as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// TP/FP/FN readings for one class from the confusion matrix.
pub fn class_metrics(cm: &ConfusionMatrix, c: usize) -> ClassMetrics {
    let tp = cm.count(c, c) as f64;
    let mut fp = 0.0;
    let mut fun = 0.0;
    for other in 0..cm.classes() {
        if other != c {
            fp += cm.count(other, c) as f64;
            fun += cm.count(c, other) as f64;
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fun);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    let iou = ratio(tp, tp + fp + fun);
    ClassMetrics { precision, recall, f1, iou }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassReport {
    pub per_class: Vec<ClassMetrics>,
    pub m_precision: f64,
    pub m_recall: f64,
    pub m_f1: f64,
    pub m_iou: f64,
}

/// Sums in sorted order so relabelling classes cannot move the result by
/// even an ulp.
pub fn mean_exact(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum::<f64>() / values.len() as f64
}

/// Unweighted arithmetic means over exactly `classes` per-class tuples.
pub fn mean_metrics(per_class: &[ClassMetrics], classes: usize) -> Result<ClassReport, MetricsError> {
    if per_class.len() != classes {
        return Err(MetricsError::WrongClassCount { expected: classes, got: per_class.len() });
    }
    let collect = |f: fn(&ClassMetrics) -> f64| -> Vec<f64> { per_class.iter().map(f).collect() };
    Ok(ClassReport {
        per_class: per_class.to_vec(),
        m_precision: mean_exact(&collect(|m| m.precision)),
        m_recall: mean_exact(&collect(|m| m.recall)),
        m_f1: mean_exact(&collect(|m| m.f1)),
        m_iou: mean_exact(&collect(|m| m.iou)),
    })
}

/// Full report straight from a confusion matrix.
pub fn report(cm: &ConfusionMatrix) -> ClassReport {
    let per_class: Vec<ClassMetrics> =
        (0..cm.classes()).map(|c| class_metrics(cm, c)).collect();
    mean_metrics(&per_class, cm.classes()).expect("one entry per class")
}

/// CSV with one row per class plus a means row. Values print in shortest
/// round-trip form so downstream recomputation is exact.
pub fn report_csv(report: &ClassReport) -> String {
    let mut out = String::from("class,abbrev,precision,recall,f1,iou\n");
    for (c, m) in report.per_class.iter().enumerate() {
        out.push_str(&format!(
            "{c},{},{},{},{},{}\n",
            class_abbrev(c),
            m.precision,
            m.recall,
            m.f1,
            m.iou
        ));
    }
    out.push_str(&format!(
        "mean,,{},{},{},{}\n",
        report.m_precision, report.m_recall, report.m_f1, report.m_iou
    ));
    out
}

/// Human-readable aligned table (4 decimal places).
pub fn report_table(report: &ClassReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<6} {:<10} {:>10} {:>10} {:>10} {:>10}\n",
        "class", "abbrev", "precision", "recall", "f1", "iou"
    ));
    for (c, m) in report.per_class.iter().enumerate() {
        out.push_str(&format!(
            "{:<6} {:<10} {:>10.4} {:>10.4} {:>10.4} {:>10.4}\n",
            c,
            class_abbrev(c),
            m.precision,
            m.recall,
            m.f1,
            m.iou
        ));
    }
    out.push_str(&format!(
        "{:<6} {:<10} {:>10.4} {:>10.4} {:>10.4} {:>10.4}\n",
        "mean", "", report.m_precision, report.m_recall, report.m_f1, report.m_iou
    ));
    out
}
