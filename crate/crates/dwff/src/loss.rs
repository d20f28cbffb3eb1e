//! The composite training objective.
//!
//! total = α·dice + β·focal + λ₁·Σω² − λ₂·H(weights)
//!
//! Dice drives region overlap, focal up-weights hard pixels, the L2 term
//! covers multiplicative weight matrices only, and the entropy term is
//! *subtracted* so minimizing the total pushes the fusion weights toward a
//! uniform distribution (the guard against weight collapse).

use thiserror::Error;

use crate::data::LabelMap;
use crate::tape::{GradTape, ValueId};
use crate::tensor::TensorError;

pub const PROB_CLAMP: f64 = 1e-7;
pub const PROB_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("probabilities at pixel {pixel} sum to {sum}, expected 1")]
    ProbsNotNormalized { pixel: usize, sum: f64 },
    #[error("fusion weight at ({row},{col}) is negative: {value}")]
    NegativeWeight { row: usize, col: usize, value: f64 },
    #[error("labels shaped {labels:?} do not match probabilities {probs:?}")]
    LabelShapeMismatch { labels: Vec<usize>, probs: Vec<usize> },
    #[error("label id {id} exceeds class count {classes}")]
    LabelOutOfRange { id: u8, classes: usize },
    #[error("invalid loss config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Coefficients of the composite loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub alpha_t: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda1: 0.04,
            lambda2: 0.01,
            alpha: 0.5,
            beta: 0.5,
            epsilon: 1.0,
            gamma: 2.0,
            alpha_t: 0.25,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.epsilon < 0.0 {
            return Err(LossError::BadConfig("lambda1, lambda2, epsilon must be >= 0".into()));
        }
        if self.alpha < 0.0 || self.beta < 0.0 || (self.alpha == 0.0 && self.beta == 0.0) {
            return Err(LossError::BadConfig("alpha, beta must be >= 0 and not both 0".into()));
        }
        if self.gamma < 0.0 {
            return Err(LossError::BadConfig("gamma must be >= 0".into()));
        }
        if !(self.alpha_t > 0.0 && self.alpha_t <= 1.0) {
            return Err(LossError::BadConfig("alpha_t must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-term record for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub dice: f64,
    pub focal: f64,
    pub seg: f64,
    pub l2: f64,
    pub entropy: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Composes the terms exactly the way the tape does, so recomputation
    /// agrees bit for bit.
    pub fn compose(dice: f64, focal: f64, l2: f64, entropy: f64, cfg: &LossConfig) -> Self {
        let seg = cfg.alpha * dice + cfg.beta * focal;
        let total = (seg + cfg.lambda1 * l2) + (-cfg.lambda2 * entropy);
        LossBreakdown { dice, focal, seg, l2, entropy, total }
    }

    pub const CSV_HEADER: &'static str = "step,dice,focal,seg,l2,entropy,total";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{}",
            self.dice, self.focal, self.seg, self.l2, self.entropy, self.total
        )
    }
}

fn check_normalized(tape: &GradTape, probs: ValueId) -> Result<(usize, usize, usize), LossError> {
    let shape = tape.value(probs).shape().to_vec();
    if shape.len() != 4 {
        return Err(TensorError::ShapeMismatch { left: shape, right: vec![0, 0, 0, 0] }.into());
    }
    let (batch, classes, pixels) = (shape[0], shape[1], shape[2] * shape[3]);
    let data = tape.value(probs).data();
    for b in 0..batch {
        for p in 0..pixels {
            let mut sum = 0.0;
            for c in 0..classes {
                sum += data[(b * classes + c) * pixels + p];
            }
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(LossError::ProbsNotNormalized { pixel: b * pixels + p, sum });
            }
        }
    }
    Ok((batch, classes, pixels))
}

fn check_labels(
    tape: &GradTape,
    probs: ValueId,
    labels: &LabelMap,
) -> Result<(), LossError> {
    let ps = tape.value(probs).shape();
    let [b, h, w] = labels.shape();
    if [b, h, w] != [ps[0], ps[2], ps[3]] {
        return Err(LossError::LabelShapeMismatch {
            labels: vec![b, h, w],
            probs: ps.to_vec(),
        });
    }
    let classes = ps[1];
    if let Some(&bad) = labels.ids().iter().find(|&&id| id as usize >= classes) {
        return Err(LossError::LabelOutOfRange { id: bad, classes });
    }
    Ok(())
}

/// Per-class soft Dice coefficients (2·Σ p·y + ε) / (Σ p + Σ y + ε) over
/// the whole batch, as a length-C tape value.
pub fn dice_coefficients(
    tape: &mut GradTape,
    probs: ValueId,
    labels: &LabelMap,
    epsilon: f64,
) -> Result<ValueId, LossError> {
    let (batch, classes, pixels) = check_normalized(tape, probs)?;
    check_labels(tape, probs, labels)?;
    let mut one_hot = vec![0.0; batch * classes * pixels];
    let mut class_counts = vec![0.0; classes];
    for b in 0..batch {
        for p in 0..pixels {
            let c = labels.ids()[b * pixels + p] as usize;
            one_hot[(b * classes + c) * pixels + p] = 1.0;
            class_counts[c] += 1.0;
        }
    }
    let shape = tape.value(probs).shape().to_vec();
    let y = tape.constant(crate::tensor::Tensor::new(shape, one_hot)?);
    let ysum = tape.constant(crate::tensor::Tensor::new(vec![classes], class_counts)?);

    let soft_inter = tape.mul(probs, y)?;
    let inter = tape.reduce_sum(soft_inter, &[0, 2, 3])?;
    let psum = tape.reduce_sum(probs, &[0, 2, 3])?;
    let num = tape.affine(inter, 2.0, epsilon);
    let den_base = tape.add(psum, ysum)?;
    let den = tape.affine(den_base, 1.0, epsilon);
    Ok(tape.div(num, den)?)
}

/// Soft Dice loss over the whole batch, averaged over classes.
///
/// Per class: 1 − (2·Σ p·y + ε) / (Σ p + Σ y + ε); the smoothing constant
/// keeps never-seen never-predicted classes at exactly 0.
pub fn dice_loss(
    tape: &mut GradTape,
    probs: ValueId,
    labels: &LabelMap,
    epsilon: f64,
) -> Result<ValueId, LossError> {
    let ratio = dice_coefficients(tape, probs, labels, epsilon)?;
    let per_class = tape.affine(ratio, -1.0, 1.0);
    Ok(tape.reduce_mean(per_class, &[0])?)
}

/// Focal loss: mean over all pixels of −α_t·(1−p_t)^γ·log(p_t), where p_t is
/// the predicted probability of the true class, clamped at 1e-7.
pub fn focal_loss(
    tape: &mut GradTape,
    probs: ValueId,
    labels: &LabelMap,
    gamma: f64,
    alpha_t: f64,
) -> Result<ValueId, LossError> {
    check_normalized(tape, probs)?;
    check_labels(tape, probs, labels)?;
    let idx: Vec<usize> = labels.ids().iter().map(|&v| v as usize).collect();
    let p_t = tape.gather_class(probs, &idx)?;
    let p_t = tape.clamp_min(p_t, PROB_CLAMP);
    let one_minus = tape.affine(p_t, -1.0, 1.0);
    let focus = tape.pow_const(one_minus, gamma);
    let log_p = tape.log(p_t);
    let nll = tape.neg(log_p);
    let weighted = tape.mul(focus, nll)?;
    let scaled = tape.scale(weighted, alpha_t);
    Ok(tape.reduce_mean(scaled, &[0, 1, 2])?)
}

/// Σ ω² over the given multiplicative weight matrices. Biases, normalization
/// parameters, the temperature, and static logits stay out of this term.
pub fn l2_loss(tape: &mut GradTape, weight_matrices: &[ValueId]) -> Result<ValueId, LossError> {
    let mut acc: Option<ValueId> = None;
    for &w in weight_matrices {
        let sq = tape.sum_squares(w);
        acc = Some(match acc {
            Some(prev) => tape.add(prev, sq)?,
            None => sq,
        });
    }
    Ok(acc.unwrap_or_else(|| tape.constant(crate::tensor::Tensor::scalar(0.0))))
}

/// Mean over the batch of the fusion-weight entropy H(row) = −Σ w ln w.
pub fn weight_entropy_loss(tape: &mut GradTape, weights: ValueId) -> Result<ValueId, LossError> {
    let shape = tape.value(weights).shape().to_vec();
    if shape.len() != 2 {
        return Err(TensorError::ShapeMismatch { left: shape, right: vec![0, 0] }.into());
    }
    let data = tape.value(weights).data();
    for r in 0..shape[0] {
        for c in 0..shape[1] {
            let v = data[r * shape[1] + c];
            if v < 0.0 {
                return Err(LossError::NegativeWeight { row: r, col: c, value: v });
            }
        }
    }
    let per_row = tape.entropy_rows(weights)?;
    Ok(tape.reduce_mean(per_row, &[0])?)
}

/// Builds the full objective on the tape and reports the term values.
/// Returns the breakdown plus the ValueId of the total for backward.
pub fn total_loss(
    tape: &mut GradTape,
    probs: ValueId,
    labels: &LabelMap,
    weights: ValueId,
    weight_matrices: &[ValueId],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, ValueId), LossError> {
    cfg.validate()?;
    let dice = dice_loss(tape, probs, labels, cfg.epsilon)?;
    let focal = focal_loss(tape, probs, labels, cfg.gamma, cfg.alpha_t)?;
    let l2 = l2_loss(tape, weight_matrices)?;
    let entropy = weight_entropy_loss(tape, weights)?;

    let dice_term = tape.scale(dice, cfg.alpha);
    let focal_term = tape.scale(focal, cfg.beta);
    let seg = tape.add(dice_term, focal_term)?;
    let l2_term = tape.affine(l2, cfg.lambda1, 0.0);
    let with_l2 = tape.add(seg, l2_term)?;
    let entropy_term = tape.affine(entropy, -cfg.lambda2, 0.0);
    let total = tape.add(with_l2, entropy_term)?;

    let breakdown = LossBreakdown::compose(
        tape.value(dice).data()[0],
        tape.value(focal).data()[0],
        tape.value(l2).data()[0],
        tape.value(entropy).data()[0],
        cfg,
    );
    Ok((breakdown, total))
}
