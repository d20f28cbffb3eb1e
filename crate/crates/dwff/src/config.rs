//! Plain-text run configuration: one `key = value` per line, `#` comments,
//! flat namespace with module prefixes. Unknown keys are errors, and every
//! module precondition is checked before any command does work.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::decoder::{DecoderConfig, FusionMode};
use crate::loss::LossConfig;
use crate::optim::OptimConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: `{value}` ({expected})")]
    BadValue { key: String, value: String, expected: &'static str },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Every tunable of the pipeline. Defaults form the desk-scale profile.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    pub data_dir: PathBuf,
    pub scenes: usize,
    pub min_classes: usize,
    pub max_classes: usize,
    pub noise: f64,

    pub backbone_seed: u64,
    pub c_in: usize,
    pub patch: usize,
    pub layer_ids: Vec<u32>,
    pub grid_h: usize,
    pub grid_w: usize,

    pub c_fus: usize,
    pub hidden: usize,
    pub groups: usize,
    pub classes: usize,
    pub mode: FusionMode,
    pub learn_temp: bool,

    pub loss: LossConfig,
    pub optim: OptimConfig,

    pub epochs: usize,
    pub batch: usize,
    pub accumulation: usize,
    /// When nonzero, caps training at exactly this many optimizer steps
    /// (the cosine schedule spans this budget instead of the epoch count).
    pub steps: usize,

    pub eval_split: String,
    pub eval_checkpoint: PathBuf,

    pub gradcheck_batch: usize,
    pub gradcheck_step: f64,
    /// 0 probes every coordinate.
    pub gradcheck_max_coords: usize,

    pub entropy_bins: usize,
    pub entropy_split: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            data_dir: PathBuf::from("data"),
            scenes: 80,
            min_classes: 2,
            max_classes: 8,
            noise: 0.05,
            backbone_seed: 1234,
            c_in: 32,
            patch: 4,
            layer_ids: vec![1, 8, 16, 24],
            grid_h: 16,
            grid_w: 16,
            c_fus: 64,
            hidden: 128,
            groups: 8,
            classes: 15,
            mode: FusionMode::Dynamic,
            learn_temp: true,
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            epochs: 20,
            batch: 4,
            accumulation: 1,
            steps: 0,
            eval_split: "test".into(),
            eval_checkpoint: PathBuf::from("checkpoint_final.dwfc"),
            gradcheck_batch: 2,
            gradcheck_step: 1e-5,
            gradcheck_max_coords: 64,
            entropy_bins: 20,
            entropy_split: "test".into(),
        }
    }
}

impl RunConfig {
    pub fn m(&self) -> usize {
        self.layer_ids.len()
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            m: self.m(),
            c_in: self.c_in,
            c_fus: self.c_fus,
            hidden: self.hidden,
            groups: self.groups,
            classes: self.classes,
            learn_temp: self.learn_temp,
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(
            key: &str,
            value: &str,
            expected: &'static str,
        ) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                expected,
            })
        }
        match key {
            "seed" => self.seed = parse(key, value, "u64")?,
            "data.dir" => self.data_dir = PathBuf::from(value),
            "data.scenes" => self.scenes = parse(key, value, "usize")?,
            "data.min_classes" => self.min_classes = parse(key, value, "usize")?,
            "data.max_classes" => self.max_classes = parse(key, value, "usize")?,
            "data.noise" => self.noise = parse(key, value, "f64")?,
            "backbone.seed" => self.backbone_seed = parse(key, value, "u64")?,
            "backbone.c_in" => self.c_in = parse(key, value, "usize")?,
            "backbone.patch" => self.patch = parse(key, value, "usize")?,
            "backbone.layer_ids" => {
                let ids: Result<Vec<u32>, _> =
                    value.split(',').map(|v| v.trim().parse::<u32>()).collect();
                self.layer_ids = ids.map_err(|_| ConfigError::BadValue {
                    key: key.to_string(),
                    value: value.to_string(),
                    expected: "comma-separated u32 list",
                })?;
            }
            "grid.h" => self.grid_h = parse(key, value, "usize")?,
            "grid.w" => self.grid_w = parse(key, value, "usize")?,
            "model.c_fus" => self.c_fus = parse(key, value, "usize")?,
            "model.hidden" => self.hidden = parse(key, value, "usize")?,
            "model.groups" => self.groups = parse(key, value, "usize")?,
            "model.classes" => self.classes = parse(key, value, "usize")?,
            "model.mode" => {
                self.mode = FusionMode::parse(value).ok_or_else(|| ConfigError::BadValue {
                    key: key.to_string(),
                    value: value.to_string(),
                    expected: "dwff | swff | nwff-<L>",
                })?;
            }
            "model.learn_temp" => self.learn_temp = parse(key, value, "bool")?,
            "loss.lambda1" => self.loss.lambda1 = parse(key, value, "f64")?,
            "loss.lambda2" => self.loss.lambda2 = parse(key, value, "f64")?,
            "loss.alpha" => self.loss.alpha = parse(key, value, "f64")?,
            "loss.beta" => self.loss.beta = parse(key, value, "f64")?,
            "loss.epsilon" => self.loss.epsilon = parse(key, value, "f64")?,
            "loss.gamma" => self.loss.gamma = parse(key, value, "f64")?,
            "loss.alpha_t" => self.loss.alpha_t = parse(key, value, "f64")?,
            "optim.lr_max" => self.optim.lr_max = parse(key, value, "f64")?,
            "optim.lr_min" => self.optim.lr_min = parse(key, value, "f64")?,
            "optim.beta1" => self.optim.beta1 = parse(key, value, "f64")?,
            "optim.beta2" => self.optim.beta2 = parse(key, value, "f64")?,
            "optim.eps" => self.optim.eps = parse(key, value, "f64")?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, value, "f64")?,
            "train.epochs" => self.epochs = parse(key, value, "usize")?,
            "train.batch" => self.batch = parse(key, value, "usize")?,
            "train.accumulation" => self.accumulation = parse(key, value, "usize")?,
            "train.steps" => self.steps = parse(key, value, "usize")?,
            "eval.split" => self.eval_split = value.to_string(),
            "eval.checkpoint" => self.eval_checkpoint = PathBuf::from(value),
            "gradcheck.batch" => self.gradcheck_batch = parse(key, value, "usize")?,
            "gradcheck.h" => self.gradcheck_step = parse(key, value, "f64")?,
            "gradcheck.max_coords" => self.gradcheck_max_coords = parse(key, value, "usize")?,
            "entropy.bins" => self.entropy_bins = parse(key, value, "usize")?,
            "entropy.split" => self.entropy_split = value.to_string(),
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Checks every module precondition up front (validate-then-run).
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.layer_ids.is_empty() {
            return fail("backbone.layer_ids must not be empty".into());
        }
        if !self.layer_ids.windows(2).all(|w| w[0] < w[1]) {
            return fail(format!("backbone.layer_ids must strictly increase, got {:?}", self.layer_ids));
        }
        if let FusionMode::Uniform { levels } = self.mode {
            if levels == 0 || levels > self.m() {
                return fail(format!("nwff level count {levels} outside [1, {}]", self.m()));
            }
        }
        if self.classes == 0 || self.classes > crate::data::NUM_CLASSES {
            return fail(format!(
                "model.classes must lie in [1, {}], got {}",
                crate::data::NUM_CLASSES,
                self.classes
            ));
        }
        if self.groups == 0 || !self.c_fus.is_multiple_of(self.groups) {
            return fail(format!(
                "model.groups {} must divide model.c_fus {}",
                self.groups, self.c_fus
            ));
        }
        if self.c_in == 0 || self.c_fus == 0 || self.hidden == 0 {
            return fail("channel and hidden sizes must be positive".into());
        }
        if self.patch == 0 || self.grid_h == 0 || self.grid_w == 0 {
            return fail("patch and grid sizes must be positive".into());
        }
        if self.scenes < 8 {
            return fail(format!("data.scenes must be at least 8, got {}", self.scenes));
        }
        if self.min_classes == 0
            || self.min_classes > self.max_classes
            || self.max_classes > self.classes
        {
            return fail(format!(
                "scene class range [{}, {}] invalid for {} classes",
                self.min_classes, self.max_classes, self.classes
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return fail(format!("data.noise must lie in [0, 1], got {}", self.noise));
        }
        if self.batch == 0 || self.accumulation == 0 {
            return fail("train.batch and train.accumulation must be positive".into());
        }
        if self.optim.lr_max <= 0.0 || self.optim.lr_min < 0.0 || self.optim.lr_min > self.optim.lr_max {
            return fail("require 0 < lr_min <= lr_max (lr_min may be 0)".to_string());
        }
        if !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2) {
            return fail("optimizer betas must lie in [0, 1)".into());
        }
        if self.optim.eps <= 0.0 || self.optim.weight_decay < 0.0 {
            return fail("optim.eps must be positive and weight_decay nonnegative".into());
        }
        self.loss.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.gradcheck_batch == 0 || self.gradcheck_step <= 0.0 {
            return fail("gradcheck.batch and gradcheck.h must be positive".into());
        }
        if self.entropy_bins == 0 {
            return fail("entropy.bins must be positive".into());
        }
        for split in [&self.eval_split, &self.entropy_split] {
            if !["train", "val", "test"].contains(&split.as_str()) {
                return fail(format!("split must be train, val, or test, got {split}"));
            }
        }
        Ok(())
    }
}

/// Keys accepted by `set`, for documentation and error listings.
pub fn known_keys() -> BTreeSet<&'static str> {
    [
        "seed",
        "data.dir",
        "data.scenes",
        "data.min_classes",
        "data.max_classes",
        "data.noise",
        "backbone.seed",
        "backbone.c_in",
        "backbone.patch",
        "backbone.layer_ids",
        "grid.h",
        "grid.w",
        "model.c_fus",
        "model.hidden",
        "model.groups",
        "model.classes",
        "model.mode",
        "model.learn_temp",
        "loss.lambda1",
        "loss.lambda2",
        "loss.alpha",
        "loss.beta",
        "loss.epsilon",
        "loss.gamma",
        "loss.alpha_t",
        "optim.lr_max",
        "optim.lr_min",
        "optim.beta1",
        "optim.beta2",
        "optim.eps",
        "optim.weight_decay",
        "train.epochs",
        "train.batch",
        "train.accumulation",
        "train.steps",
        "eval.split",
        "eval.checkpoint",
        "gradcheck.batch",
        "gradcheck.h",
        "gradcheck.max_coords",
        "entropy.bins",
        "entropy.split",
    ]
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn parses_comments_and_overrides() {
        let cfg = RunConfig::from_text(
            "# a comment\nseed = 7\nmodel.mode = nwff-2  # trailing comment\nloss.gamma = 1.5\nbackbone.layer_ids = 2, 4, 8, 16\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.mode, FusionMode::Uniform { levels: 2 });
        assert_eq!(cfg.loss.gamma, 1.5);
        assert_eq!(cfg.layer_ids, vec![2, 4, 8, 16]);
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = RunConfig::from_text("no.such.key = 1\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(k) if k == "no.such.key"));
    }

    #[test]
    fn bad_values_are_reported() {
        assert!(matches!(
            RunConfig::from_text("seed = banana\n"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            RunConfig::from_text("model.mode = nwff-0\n"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(RunConfig::from_text("seed 7\n"), Err(ConfigError::Syntax { .. })));
    }

    #[test]
    fn validation_catches_module_preconditions() {
        assert!(RunConfig::from_text("model.groups = 7\n").is_err());
        assert!(RunConfig::from_text("data.scenes = 4\n").is_err());
        assert!(RunConfig::from_text("loss.alpha = 0\nloss.beta = 0\n").is_err());
        assert!(RunConfig::from_text("backbone.layer_ids = 8, 3\n").is_err());
        assert!(RunConfig::from_text("model.mode = nwff-9\n").is_err());
        assert!(RunConfig::from_text("eval.split = dev\n").is_err());
    }

    #[test]
    fn every_known_key_round_trips() {
        let mut cfg = RunConfig::default();
        for key in known_keys() {
            let sample = match key {
                "data.dir" | "eval.checkpoint" => "some/path",
                "model.mode" => "swff",
                "model.learn_temp" => "false",
                "backbone.layer_ids" => "1,2,3,4",
                "eval.split" | "entropy.split" => "val",
                _ => "1",
            };
            cfg.set(key, sample).unwrap_or_else(|e| panic!("key {key}: {e}"));
        }
    }
}
