//! AdamW with decoupled weight decay, cosine-annealed learning rate,
//! gradient accumulation, and checkpointing.
//!
//! Weight decay defaults to 0 because the objective already carries an
//! explicit L2 term; turning both on would silently change the meaning of
//! its coefficient.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::decoder::{DecoderConfig, DecoderParams};
use crate::io::{self, FormatError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient for parameter {0}; step rejected")]
    NonFiniteGrad(String),
    #[error("gradient for {name} has {got} values, parameter has {expected}")]
    GradShapeMismatch { name: String, expected: usize, got: usize },
    #[error("checkpoint parameter {name} shaped {found:?}, config expects {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Optimizer hyperparameters; `total_steps` drives the cosine schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_max: 2e-2,
            lr_min: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Cosine annealing from `lr_max` at t = 0 down to `lr_min` at t = T.
/// Steps past T clamp to `lr_min`. Written as a convex blend so the
/// endpoints and midpoint come out exact.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    debug_assert!(total >= 1);
    if t >= total {
        return lr_min;
    }
    let frac = t as f64 / total as f64;
    let blend = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
    (1.0 - blend) * lr_min + blend * lr_max
}

/// First/second moment estimates per parameter, in enumeration order.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: usize,
}

impl OptimizerState {
    pub fn new(param_sizes: &[usize]) -> Self {
        OptimizerState {
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn update_one(
    m: &mut [f64],
    v: &mut [f64],
    data: &mut [f64],
    g: &[f64],
    lr: f64,
    cfg: &OptimConfig,
    bc1: f64,
    bc2: f64,
) {
    for j in 0..data.len() {
        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
        let m_hat = m[j] / bc1;
        let v_hat = v[j] / bc2;
        data[j] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * data[j]);
    }
}

/// One AdamW update. Rejects the whole step, leaving parameters and state
/// untouched, if any gradient is non-finite.
pub fn adamw_step(
    state: &mut OptimizerState,
    names: &[String],
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    lr: f64,
    cfg: &OptimConfig,
) -> Result<(), OptimError> {
    assert_eq!(names.len(), params.len());
    assert_eq!(names.len(), grads.len());
    for (i, g) in grads.iter().enumerate() {
        if g.len() != params[i].len() {
            return Err(OptimError::GradShapeMismatch {
                name: names[i].clone(),
                expected: params[i].len(),
                got: g.len(),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteGrad(names[i].clone()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, param) in params.iter_mut().enumerate() {
        update_one(&mut state.m[i], &mut state.v[i], param.data_mut(), &grads[i], lr, cfg, bc1, bc2);
    }
    Ok(())
}

/// AdamW over a decoder's trainable enumeration, updating fields in place.
pub fn adamw_step_params(
    state: &mut OptimizerState,
    params: &mut DecoderParams,
    names: &[String],
    grads: &[Vec<f64>],
    lr: f64,
    cfg: &OptimConfig,
) -> Result<(), OptimError> {
    assert_eq!(names.len(), grads.len());
    for (i, g) in grads.iter().enumerate() {
        let expected = params.get(&names[i]).len();
        if g.len() != expected {
            return Err(OptimError::GradShapeMismatch {
                name: names[i].clone(),
                expected,
                got: g.len(),
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteGrad(names[i].clone()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, name) in names.iter().enumerate() {
        let tensor = params.get_mut(name);
        update_one(&mut state.m[i], &mut state.v[i], tensor.data_mut(), &grads[i], lr, cfg, bc1, bc2);
    }
    Ok(())
}

/// Sums gradients across the micro-batches of one accumulation window and
/// hands back their mean. Parameters stay untouched until the window closes.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    sums: Vec<Vec<f64>>,
    pub count: usize,
}

impl GradAccumulator {
    pub fn new(param_sizes: &[usize]) -> Self {
        GradAccumulator { sums: param_sizes.iter().map(|&n| vec![0.0; n]).collect(), count: 0 }
    }

    pub fn add(&mut self, grads: &[Vec<f64>]) {
        assert_eq!(grads.len(), self.sums.len());
        for (sum, g) in self.sums.iter_mut().zip(grads) {
            for (s, gv) in sum.iter_mut().zip(g) {
                *s += gv;
            }
        }
        self.count += 1;
    }

    /// Mean gradient over the window; resets the accumulator.
    pub fn take_mean(&mut self) -> Vec<Vec<f64>> {
        let inv = 1.0 / self.count.max(1) as f64;
        let out = self.sums.iter().map(|s| s.iter().map(|v| v * inv).collect()).collect();
        for s in &mut self.sums {
            s.fill(0.0);
        }
        self.count = 0;
        out
    }
}

// ── Checkpoints ─────────────────────────────────────────────────────
//
// A checkpoint is one file:
//
//   magic     8 bytes "DWFFCKP1"
//   u64       manifest byte length
//   manifest  UTF-8 lines: `cfg.<key> <value>`, `mode <label>`, `step <t>`,
//             then one `tensor <name> <offset> <ndim> <dims…>` per record
//   payload   concatenated DWF1 blobs (float64), at the listed offsets
//
// Parameters are stored in full (mode-independent); optimizer moments only
// for the trainable set, under `optim.m.<name>` / `optim.v.<name>`.

pub const CKPT_MAGIC: &[u8; 8] = b"DWFFCKP1";

#[derive(Debug)]
pub struct Checkpoint {
    pub params: DecoderParams,
    pub state: OptimizerState,
    pub mode_label: String,
}

pub fn save_checkpoint(
    path: &Path,
    params: &DecoderParams,
    state: &OptimizerState,
    mode_label: &str,
    trainable: &[String],
) -> Result<(), OptimError> {
    let cfg = &params.cfg;
    let mut manifest = String::new();
    manifest.push_str(&format!("cfg.m {}\n", cfg.m));
    manifest.push_str(&format!("cfg.c_in {}\n", cfg.c_in));
    manifest.push_str(&format!("cfg.c_fus {}\n", cfg.c_fus));
    manifest.push_str(&format!("cfg.hidden {}\n", cfg.hidden));
    manifest.push_str(&format!("cfg.groups {}\n", cfg.groups));
    manifest.push_str(&format!("cfg.classes {}\n", cfg.classes));
    manifest.push_str(&format!("cfg.learn_temp {}\n", cfg.learn_temp));
    manifest.push_str(&format!("mode {mode_label}\n"));
    manifest.push_str(&format!("step {}\n", state.t));

    let mut records: Vec<(String, Tensor)> = Vec::new();
    for name in params.all_names() {
        records.push((name.clone(), params.get(&name).clone()));
    }
    for (i, name) in trainable.iter().enumerate() {
        let shape = params.get(name).shape().to_vec();
        records.push((
            format!("optim.m.{name}"),
            Tensor::new(shape.clone(), state.m[i].clone()).expect("moment shape"),
        ));
        records.push((
            format!("optim.v.{name}"),
            Tensor::new(shape, state.v[i].clone()).expect("moment shape"),
        ));
    }

    let mut payload = Vec::new();
    let mut tensor_lines = String::new();
    for (name, tensor) in &records {
        let offset = payload.len();
        let blob = io::encode_tensor_f64(tensor)?;
        payload.extend_from_slice(&blob);
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        tensor_lines.push_str(&format!(
            "tensor {name} {offset} {} {}\n",
            tensor.shape().len(),
            dims.join(" ")
        ));
    }
    manifest.push_str(&tensor_lines);

    let mut out = Vec::with_capacity(16 + manifest.len() + payload.len());
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&payload);
    fs::write(path, out).map_err(|e| OptimError::Io { path: path.display().to_string(), source: e })
}

/// Loads a checkpoint, validating every tensor shape against the stored
/// architecture. `expected` (when given) must match the stored architecture
/// exactly; a mismatch names both shapes.
pub fn load_checkpoint(path: &Path, expected: Option<&DecoderConfig>) -> Result<Checkpoint, OptimError> {
    let bytes =
        fs::read(path).map_err(|e| OptimError::Io { path: path.display().to_string(), source: e })?;
    if bytes.len() < 16 || &bytes[0..8] != CKPT_MAGIC {
        return Err(OptimError::Malformed("missing checkpoint magic".into()));
    }
    let mut raw = [0u8; 8];
    raw.copy_from_slice(&bytes[8..16]);
    let manifest_len = u64::from_le_bytes(raw) as usize;
    if bytes.len() < 16 + manifest_len {
        return Err(OptimError::Malformed("manifest truncated".into()));
    }
    let manifest = std::str::from_utf8(&bytes[16..16 + manifest_len])
        .map_err(|_| OptimError::Malformed("manifest is not UTF-8".into()))?;
    let payload = &bytes[16 + manifest_len..];

    let mut cfg_pairs = std::collections::BTreeMap::new();
    let mut mode_label = String::new();
    let mut step = 0usize;
    let mut tensors: Vec<(String, usize)> = Vec::new();
    for line in manifest.lines() {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("mode") => mode_label = parts.next().unwrap_or_default().to_string(),
            Some("step") => {
                step = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| OptimError::Malformed("bad step line".into()))?
            }
            Some(key) if key.starts_with("cfg.") => {
                cfg_pairs.insert(key.to_string(), parts.next().unwrap_or_default().to_string());
            }
            Some("tensor") => {
                let name = parts
                    .next()
                    .ok_or_else(|| OptimError::Malformed("tensor line missing name".into()))?;
                let offset: usize = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| OptimError::Malformed("tensor line missing offset".into()))?;
                tensors.push((name.to_string(), offset));
            }
            _ => {}
        }
    }
    let get_usize = |key: &str| -> Result<usize, OptimError> {
        cfg_pairs
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| OptimError::Malformed(format!("missing {key}")))
    };
    let stored_cfg = DecoderConfig {
        m: get_usize("cfg.m")?,
        c_in: get_usize("cfg.c_in")?,
        c_fus: get_usize("cfg.c_fus")?,
        hidden: get_usize("cfg.hidden")?,
        groups: get_usize("cfg.groups")?,
        classes: get_usize("cfg.classes")?,
        learn_temp: cfg_pairs.get("cfg.learn_temp").map(|v| v == "true").unwrap_or(true),
    };
    if let Some(exp) = expected {
        if *exp != stored_cfg {
            return Err(OptimError::Malformed(format!(
                "checkpoint architecture {stored_cfg:?} does not match configured {exp:?}"
            )));
        }
    }

    let mut by_name = std::collections::BTreeMap::new();
    for (name, offset) in &tensors {
        if *offset >= payload.len() {
            return Err(OptimError::Malformed(format!("offset of {name} out of range")));
        }
        let (tensor, _) = io::decode_tensor(&payload[*offset..])?;
        by_name.insert(name.clone(), tensor);
    }

    let mut params = DecoderParams::init(&stored_cfg, 0);
    for name in params.all_names() {
        let tensor = by_name
            .remove(&name)
            .ok_or_else(|| OptimError::Malformed(format!("checkpoint missing {name}")))?;
        let expected_shape = params.get(&name).shape().to_vec();
        if tensor.shape() != expected_shape.as_slice() {
            return Err(OptimError::ShapeMismatch {
                name,
                expected: expected_shape,
                found: tensor.shape().to_vec(),
            });
        }
        *params.get_mut(&name) = tensor;
    }

    let mode = crate::decoder::FusionMode::parse(&mode_label)
        .ok_or_else(|| OptimError::Malformed(format!("unknown mode {mode_label}")))?;
    let trainable = params.trainable_names(mode);
    let mut state = OptimizerState::new(
        &trainable.iter().map(|n| params.get(n).len()).collect::<Vec<_>>(),
    );
    state.t = step;
    for (i, name) in trainable.iter().enumerate() {
        if let Some(m) = by_name.remove(&format!("optim.m.{name}")) {
            state.m[i] = m.into_data();
        }
        if let Some(v) = by_name.remove(&format!("optim.v.{name}")) {
            state.v[i] = v.into_data();
        }
    }

    Ok(Checkpoint { params, state, mode_label })
}
