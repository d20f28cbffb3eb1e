//! Finite-difference verification of backward rules.
//!
//! A gradient check evaluates a scalar function twice per probed coordinate
//! (central differences at step `h`) and compares against the analytic
//! gradient the caller obtained from a tape backward pass. The relative
//! error per coordinate is |analytic − numeric| / max(1, |numeric|).

use crate::tensor::{Tensor, TensorError};

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Upper bound on probed coordinates per tensor; `None` probes all.
    /// Sampling is a deterministic stride over the flat index space, so
    /// every tensor still gets coverage proportional to its size.
    pub max_coords_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: DEFAULT_STEP, max_coords_per_tensor: None }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter index, flat coordinate) of the worst mismatch.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

/// Compares analytic gradients against central differences of `eval`.
///
/// `eval` must be a pure function of the parameter list; `analytic[i]` holds
/// the gradient for `params[i]` with matching length. Returns the max
/// relative error over all probed coordinates.
pub fn grad_check<F>(
    mut eval: F,
    params: &[Tensor],
    analytic: &[Vec<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "one gradient per parameter");
    let h = opts.step;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), coords_checked: 0 };

    for (pi, param) in params.iter().enumerate() {
        assert_eq!(param.len(), analytic[pi].len(), "gradient length for param {pi}");
        let n = param.len();
        let coords: Vec<usize> = match opts.max_coords_per_tensor {
            Some(cap) if n > cap => (0..cap).map(|j| j * n / cap).collect(),
            _ => (0..n).collect(),
        };
        for &ci in &coords {
            let base = param.data()[ci];
            let plus = eval_perturbed(&mut eval, &mut work, pi, ci, base + h)?;
            let minus = eval_perturbed(&mut eval, &mut work, pi, ci, base - h)?;
            restore(&mut work, pi, param);
            let numeric = (plus - minus) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(TensorError::NonFinite {
                    context: format!("central difference of parameter {pi}"),
                    index: ci,
                });
            }
            let rel = (analytic[pi][ci] - numeric).abs() / numeric.abs().max(1.0);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (pi, ci);
            }
        }
    }
    Ok(report)
}

fn eval_perturbed<F>(
    eval: &mut F,
    work: &mut [Tensor],
    pi: usize,
    ci: usize,
    value: f64,
) -> Result<f64, TensorError>
where
    F: FnMut(&[Tensor]) -> f64,
{
    let mut data = work[pi].data().to_vec();
    data[ci] = value;
    work[pi] = Tensor::new(work[pi].shape().to_vec(), data).expect("same shape");
    let out = eval(work);
    if !out.is_finite() {
        return Err(TensorError::NonFinite {
            context: format!("objective at perturbed parameter {pi}"),
            index: ci,
        });
    }
    Ok(out)
}

fn restore(work: &mut [Tensor], pi: usize, original: &Tensor) {
    work[pi] = original.clone();
}
