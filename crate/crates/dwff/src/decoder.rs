//! The dynamic-weighted fusion decoder.
//!
//! Per level: 1×1 projection into a shared C_fus space, GroupNorm, ReLU.
//! Fusion weights come from one of three modes:
//!
//! * dynamic (`dwff`)  — GAP each projected level, concatenate, two-layer
//!   MLP, temperature softmax; weights are per sample.
//! * static  (`swff`)  — softmax of learnable input-independent logits.
//! * uniform (`nwff-L`) — constant 1/L on the deepest L levels, no gradient.
//!
//! The fused map goes through a per-pixel linear head to per-class logits at
//! patch resolution.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::data::FeatureStack;
use crate::tape::{GradTape, ValueId};
use crate::tensor::{Tensor, TensorError};

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Tolerance on fusion weight row sums before fusing.
pub const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("stack has {got} levels, decoder configured for {expected}")]
    LevelCountMismatch { expected: usize, got: usize },
    #[error("uniform fusion over {levels} levels exceeds available {m}")]
    UniformLevelsOutOfRange { levels: usize, m: usize },
    #[error("fusion weight row {row} sums to {sum}, expected 1")]
    RowSumInvalid { row: usize, sum: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Fusion weighting strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    /// Input-conditioned per-sample weights (GAP → MLP → temperature softmax).
    Dynamic,
    /// Learnable input-independent softmax weights.
    Static,
    /// Fixed 1/L average over the deepest L levels.
    Uniform { levels: usize },
}

impl FusionMode {
    /// Conventional label used in reports and configs.
    pub fn label(&self) -> String {
        match self {
            FusionMode::Dynamic => "dwff".into(),
            FusionMode::Static => "swff".into(),
            FusionMode::Uniform { levels } => format!("nwff-{levels}"),
        }
    }

    pub fn parse(s: &str) -> Option<FusionMode> {
        match s {
            "dwff" => Some(FusionMode::Dynamic),
            "swff" => Some(FusionMode::Static),
            _ => s
                .strip_prefix("nwff-")
                .and_then(|n| n.parse().ok())
                .filter(|&l| l >= 1)
                .map(|levels| FusionMode::Uniform { levels }),
        }
    }

    /// The six standard ablation variants in report order.
    pub fn ablation_suite(m: usize) -> Vec<FusionMode> {
        let mut out: Vec<FusionMode> =
            (1..=m).map(|levels| FusionMode::Uniform { levels }).collect();
        out.push(FusionMode::Static);
        out.push(FusionMode::Dynamic);
        out
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Architecture hyperparameters; shapes of every parameter tensor follow
/// from these.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub m: usize,
    pub c_in: usize,
    pub c_fus: usize,
    pub hidden: usize,
    pub groups: usize,
    pub classes: usize,
    /// When false the temperature stays at its initial value and is left out
    /// of the trainable enumeration.
    pub learn_temp: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelProjection {
    pub weight: Tensor,  // c_fus × c_in
    pub bias: Tensor,    // c_fus
    pub gn_gain: Tensor, // c_fus
    pub gn_bias: Tensor, // c_fus
}

/// Every trainable value of the decoder. The backbone is not represented
/// here at all: it never trains.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub cfg: DecoderConfig,
    pub levels: Vec<LevelProjection>,
    pub mlp_w1: Tensor, // hidden × (m·c_fus)
    pub mlp_b1: Tensor, // hidden
    pub mlp_w2: Tensor, // m × hidden
    pub mlp_b2: Tensor, // m
    /// Raw τ; the softmax temperature is exp(τ), so it stays positive.
    pub log_temp: Tensor, // scalar
    /// Static-mode logits, stored 1×m so they softmax as a single row.
    pub static_logits: Tensor,
    pub head_weight: Tensor, // classes × c_fus
    pub head_bias: Tensor,   // classes
}

fn uniform_init(rng: &mut ChaCha20Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    let shape = if rows == 1 && cols == 1 {
        vec![1]
    } else if rows == 1 {
        vec![cols]
    } else {
        vec![rows, cols]
    };
    Tensor::new(shape, data).expect("init shape")
}

impl DecoderParams {
    /// Seeded initialization; sampling order is fixed, so a seed fully
    /// determines every value.
    pub fn init(cfg: &DecoderConfig, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(crate::data::derive_seed(seed, 0x70617261));
        let levels = (0..cfg.m)
            .map(|_| LevelProjection {
                weight: uniform_init(&mut rng, cfg.c_fus, cfg.c_in, cfg.c_in),
                bias: Tensor::zeros(vec![cfg.c_fus]),
                gn_gain: Tensor::full(vec![cfg.c_fus], 1.0),
                gn_bias: Tensor::zeros(vec![cfg.c_fus]),
            })
            .collect();
        let concat = cfg.m * cfg.c_fus;
        DecoderParams {
            cfg: cfg.clone(),
            levels,
            mlp_w1: uniform_init(&mut rng, cfg.hidden, concat, concat),
            mlp_b1: Tensor::zeros(vec![cfg.hidden]),
            mlp_w2: uniform_init(&mut rng, cfg.m, cfg.hidden, cfg.hidden),
            mlp_b2: Tensor::zeros(vec![cfg.m]),
            log_temp: Tensor::scalar(0.0),
            static_logits: Tensor::zeros(vec![1, cfg.m]),
            head_weight: uniform_init(&mut rng, cfg.classes, cfg.c_fus, cfg.c_fus),
            head_bias: Tensor::zeros(vec![cfg.classes]),
        }
    }

    pub fn temperature(&self) -> f64 {
        self.log_temp.data()[0].exp()
    }

    /// Stable enumeration of the trainable set for `mode`. Projections and
    /// the head always train; the weight-generation parameters depend on the
    /// mode, and τ only trains in dynamic mode with `learn_temp`.
    pub fn trainable_names(&self, mode: FusionMode) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.cfg.m {
            names.push(format!("proj.{i}.weight"));
            names.push(format!("proj.{i}.bias"));
            names.push(format!("proj.{i}.gn_gain"));
            names.push(format!("proj.{i}.gn_bias"));
        }
        match mode {
            FusionMode::Dynamic => {
                names.push("mlp.w1".into());
                names.push("mlp.b1".into());
                names.push("mlp.w2".into());
                names.push("mlp.b2".into());
                if self.cfg.learn_temp {
                    names.push("log_temp".into());
                }
            }
            FusionMode::Static => names.push("static_logits".into()),
            FusionMode::Uniform { .. } => {}
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.field(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        // Mirrors `field`; kept separate because Rust lacks mut-polymorphism.
        if let Some(rest) = name.strip_prefix("proj.") {
            let (idx, field) = rest.split_once('.').expect("proj field");
            let level = &mut self.levels[idx.parse::<usize>().expect("level index")];
            return match field {
                "weight" => &mut level.weight,
                "bias" => &mut level.bias,
                "gn_gain" => &mut level.gn_gain,
                "gn_bias" => &mut level.gn_bias,
                other => panic!("unknown projection field {other}"),
            };
        }
        match name {
            "mlp.w1" => &mut self.mlp_w1,
            "mlp.b1" => &mut self.mlp_b1,
            "mlp.w2" => &mut self.mlp_w2,
            "mlp.b2" => &mut self.mlp_b2,
            "log_temp" => &mut self.log_temp,
            "static_logits" => &mut self.static_logits,
            "head.weight" => &mut self.head_weight,
            "head.bias" => &mut self.head_bias,
            other => panic!("unknown parameter {other}"),
        }
    }

    fn field(&self, name: &str) -> &Tensor {
        if let Some(rest) = name.strip_prefix("proj.") {
            let (idx, field) = rest.split_once('.').expect("proj field");
            let level = &self.levels[idx.parse::<usize>().expect("level index")];
            return match field {
                "weight" => &level.weight,
                "bias" => &level.bias,
                "gn_gain" => &level.gn_gain,
                "gn_bias" => &level.gn_bias,
                other => panic!("unknown projection field {other}"),
            };
        }
        match name {
            "mlp.w1" => &self.mlp_w1,
            "mlp.b1" => &self.mlp_b1,
            "mlp.w2" => &self.mlp_w2,
            "mlp.b2" => &self.mlp_b2,
            "log_temp" => &self.log_temp,
            "static_logits" => &self.static_logits,
            "head.weight" => &self.head_weight,
            "head.bias" => &self.head_bias,
            other => panic!("unknown parameter {other}"),
        }
    }

    /// Names of every parameter the checkpoint stores (mode-independent).
    pub fn all_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.cfg.m {
            names.push(format!("proj.{i}.weight"));
            names.push(format!("proj.{i}.bias"));
            names.push(format!("proj.{i}.gn_gain"));
            names.push(format!("proj.{i}.gn_bias"));
        }
        for n in ["mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2", "log_temp", "static_logits", "head.weight", "head.bias"] {
            names.push(n.into());
        }
        names
    }
}

/// Handles produced by one decoder forward pass on a tape.
pub struct ForwardPass {
    pub logits: ValueId,
    pub weights: ValueId,
    /// Trainable parameters in enumeration order, as registered on the tape.
    pub params: Vec<(String, ValueId)>,
    /// The multiplicative weight matrices that enter the L2 term.
    pub weight_matrices: Vec<ValueId>,
}

struct Registered {
    ids: Vec<(String, ValueId)>,
}

impl Registered {
    fn id(&self, name: &str) -> ValueId {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .unwrap_or_else(|| panic!("parameter {name} not registered"))
    }
}

/// Runs projection → weight generation → fusion → head for the whole stack.
/// Returns per-pixel class logits and the per-sample fusion weights.
pub fn forward(
    tape: &mut GradTape,
    stack: &FeatureStack,
    params: &DecoderParams,
    mode: FusionMode,
) -> Result<ForwardPass, DecoderError> {
    let cfg = &params.cfg;
    if stack.level_count() != cfg.m {
        return Err(DecoderError::LevelCountMismatch { expected: cfg.m, got: stack.level_count() });
    }
    if let FusionMode::Uniform { levels } = mode {
        if levels > cfg.m || levels == 0 {
            return Err(DecoderError::UniformLevelsOutOfRange { levels, m: cfg.m });
        }
    }
    let batch = stack.batch();

    // Register the trainable set in enumeration order.
    let names = params.trainable_names(mode);
    let mut reg = Registered { ids: Vec::with_capacity(names.len()) };
    for name in &names {
        let id = tape.param(name, params.get(name).clone());
        reg.ids.push((name.clone(), id));
    }
    // In dynamic mode with a frozen temperature, τ still shapes the forward
    // pass; it rides along as a constant.
    let log_temp_id = if matches!(mode, FusionMode::Dynamic) && !cfg.learn_temp {
        Some(tape.constant(params.log_temp.clone()))
    } else {
        reg.ids.iter().find(|(n, _)| n == "log_temp").map(|(_, id)| *id)
    };

    // Per-level projection into the shared space: ReLU(GN(Conv1×1(F_i))).
    let mut projected = Vec::with_capacity(cfg.m);
    for (i, level) in stack.levels.iter().enumerate() {
        let x = tape.constant(level.clone());
        let p = project_level(tape, x, &reg, i, cfg.groups)?;
        projected.push(p);
    }

    let weights = compute_weights(tape, &projected, params, mode, &reg, log_temp_id, batch)?;
    let fused = fuse(tape, &projected, weights, batch)?;
    let logits = head(tape, fused, &reg)?;

    let mut weight_matrices: Vec<ValueId> =
        (0..cfg.m).map(|i| reg.id(&format!("proj.{i}.weight"))).collect();
    if matches!(mode, FusionMode::Dynamic) {
        weight_matrices.push(reg.id("mlp.w1"));
        weight_matrices.push(reg.id("mlp.w2"));
    }
    weight_matrices.push(reg.id("head.weight"));

    Ok(ForwardPass { logits, weights, params: reg.ids, weight_matrices })
}

fn project_level(
    tape: &mut GradTape,
    x: ValueId,
    reg: &Registered,
    i: usize,
    groups: usize,
) -> Result<ValueId, DecoderError> {
    let conv = tape.channel_linear(
        x,
        reg.id(&format!("proj.{i}.weight")),
        reg.id(&format!("proj.{i}.bias")),
    )?;
    let normed = tape.group_norm(
        conv,
        reg.id(&format!("proj.{i}.gn_gain")),
        reg.id(&format!("proj.{i}.gn_bias")),
        groups,
        GROUP_NORM_EPS,
    )?;
    Ok(tape.relu(normed))
}

fn compute_weights(
    tape: &mut GradTape,
    projected: &[ValueId],
    params: &DecoderParams,
    mode: FusionMode,
    reg: &Registered,
    log_temp_id: Option<ValueId>,
    batch: usize,
) -> Result<ValueId, DecoderError> {
    let m = params.cfg.m;
    match mode {
        FusionMode::Dynamic => {
            let mut pooled = Vec::with_capacity(m);
            for &p in projected {
                pooled.push(tape.reduce_mean(p, &[2, 3])?);
            }
            let concat = tape.concat_cols(&pooled)?;
            let h1 = tape.linear(concat, reg.id("mlp.w1"), reg.id("mlp.b1"))?;
            let h1 = tape.relu(h1);
            let scores = tape.linear(h1, reg.id("mlp.w2"), reg.id("mlp.b2"))?;
            let temp = tape.exp(log_temp_id.expect("dynamic mode carries a temperature"));
            Ok(tape.softmax_rows(scores, Some(temp))?)
        }
        FusionMode::Static => {
            let row = tape.softmax_rows(reg.id("static_logits"), None)?;
            // Flatten 1×m to m for row broadcast.
            let flat = tape.reduce_sum(row, &[0])?;
            Ok(tape.broadcast_rows(flat, batch)?)
        }
        FusionMode::Uniform { levels } => {
            let mut row = vec![0.0; m];
            let share = 1.0 / levels as f64;
            for v in row.iter_mut().skip(m - levels) {
                *v = share;
            }
            let mut data = Vec::with_capacity(batch * m);
            for _ in 0..batch {
                data.extend_from_slice(&row);
            }
            Ok(tape.constant(Tensor::new(vec![batch, m], data)?))
        }
    }
}

/// Validates that every weight row is a unit-sum distribution, then takes
/// the per-sample convex combination of the projected levels.
pub fn fuse(
    tape: &mut GradTape,
    projected: &[ValueId],
    weights: ValueId,
    batch: usize,
) -> Result<ValueId, DecoderError> {
    let m = projected.len();
    let wt = tape.value(weights).data();
    for b in 0..batch {
        let sum: f64 = wt[b * m..(b + 1) * m].iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(DecoderError::RowSumInvalid { row: b, sum });
        }
    }
    Ok(tape.weighted_sum(projected, weights)?)
}

fn head(tape: &mut GradTape, fused: ValueId, reg: &Registered) -> Result<ValueId, DecoderError> {
    Ok(tape.channel_linear(fused, reg.id("head.weight"), reg.id("head.bias"))?)
}
