//! Command implementations behind the CLI and the examples: dataset
//! generation, training with gradient accumulation, the six-variant
//! ablation sweep, evaluation, entropy analysis, and gradient checking.
//!
//! Everything here is deterministic under a fixed seed: RNG streams are
//! derived per purpose, iteration orders are fixed, and all emitted CSV/SVG
//! bytes depend only on the config.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::data::{
    self, derive_seed, DataError, FeatureStack, LabelMap, SceneRecord, Split, SurrogateBackbone,
};
use crate::decoder::{self, DecoderError, DecoderParams, FusionMode};
use crate::entropy::{self, EntropyError};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::io::FormatError;
use crate::loss::{self, LossBreakdown, LossError};
use crate::metrics::{self, ClassReport, ConfusionMatrix, MetricsError};
use crate::optim::{self, cosine_lr, GradAccumulator, OptimError, OptimizerState};
use crate::tape::GradTape;
use crate::tensor::{Tensor, TensorError};

pub const GRADCHECK_TOL: f64 = 1e-4;

// RNG stream tags; any fixed distinct constants work.
const STREAM_SCENE: u64 = 0x5343;
const STREAM_CLASS_COUNT: u64 = 0x434C;
const STREAM_SHUFFLE: u64 = 0x5348;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Entropy(#[from] EntropyError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("non-finite loss at optimizer step {step}; last good checkpoint retained")]
    NonFiniteLoss { step: usize },
    #[error("gradient check failed: max relative error {max_rel_err:.3e} exceeds {tol:.0e}", tol = GRADCHECK_TOL)]
    GradCheckFailed { max_rel_err: f64 },
    #[error("output {0} already exists and is not empty; pass --force to overwrite")]
    OutputExists(String),
    #[error("dataset {key} is {dataset}, config expects {config}")]
    MetaMismatch { key: String, dataset: String, config: String },
}

impl RunError {
    /// Usage errors (exit 1) versus runtime errors (exit 2).
    pub fn is_usage(&self) -> bool {
        matches!(self, RunError::Config(_))
    }
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<(), RunError> {
    fs::write(path, body).map_err(|e| RunError::Io { path: path.display().to_string(), source: e })
}

fn create_dir(path: &Path) -> Result<(), RunError> {
    fs::create_dir_all(path)
        .map_err(|e| RunError::Io { path: path.display().to_string(), source: e })
}

// ── gen-data ────────────────────────────────────────────────────────

pub struct GenSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Generates `cfg.scenes` synthetic scenes, runs the frozen surrogate over
/// them, and lays the results out as a DWF1 dataset with split manifests.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path, force: bool) -> Result<GenSummary, RunError> {
    if out.exists() && out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false) && !force {
        return Err(RunError::OutputExists(out.display().to_string()));
    }
    create_dir(out)?;
    let backbone = SurrogateBackbone::new(cfg.backbone_seed, cfg.c_in, cfg.patch, cfg.m());
    let (train, val, test) = data::split_dataset(cfg.scenes, (6, 1, 1), cfg.seed)?;
    let split_of = |id: usize| -> Split {
        if train.contains(&id) {
            Split::Train
        } else if val.contains(&id) {
            Split::Val
        } else {
            Split::Test
        }
    };
    for id in 0..cfg.scenes {
        let mut count_rng =
            ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_CLASS_COUNT ^ (id as u64) << 16));
        let class_count = count_rng.gen_range(cfg.min_classes..=cfg.max_classes);
        let scene_seed = derive_seed(cfg.seed, STREAM_SCENE ^ (id as u64) << 16);
        let (image, labels) = data::generate_scene_pooled(
            scene_seed,
            cfg.grid_h,
            cfg.grid_w,
            class_count,
            cfg.patch,
            cfg.noise,
            cfg.classes,
        )?;
        let stack = backbone.extract(&image, &cfg.layer_ids)?;
        data::save_scene(out, split_of(id), id, &stack, &labels)?;
    }
    data::write_manifest(out, Split::Train, &train)?;
    data::write_manifest(out, Split::Val, &val)?;
    data::write_manifest(out, Split::Test, &test)?;
    write_meta(cfg, out)?;
    Ok(GenSummary { train: train.len(), val: val.len(), test: test.len() })
}

fn write_meta(cfg: &RunConfig, out: &Path) -> Result<(), RunError> {
    let layer_ids: Vec<String> = cfg.layer_ids.iter().map(|v| v.to_string()).collect();
    let body = format!(
        "backbone.c_in = {}\nbackbone.patch = {}\nbackbone.layer_ids = {}\ngrid.h = {}\ngrid.w = {}\nmodel.classes = {}\ndata.scenes = {}\n",
        cfg.c_in,
        cfg.patch,
        layer_ids.join(","),
        cfg.grid_h,
        cfg.grid_w,
        cfg.classes,
        cfg.scenes,
    );
    write_file(&out.join("meta.txt"), body)
}

/// Verifies the dataset was generated with dimensions the config expects.
fn check_meta(cfg: &RunConfig, root: &Path) -> Result<(), RunError> {
    let path = root.join("meta.txt");
    if !path.exists() {
        return Ok(()); // externally produced datasets may omit it
    }
    let body = fs::read_to_string(&path)
        .map_err(|e| RunError::Io { path: path.display().to_string(), source: e })?;
    let layer_ids: Vec<String> = cfg.layer_ids.iter().map(|v| v.to_string()).collect();
    let expect = [
        ("backbone.c_in", cfg.c_in.to_string()),
        ("backbone.patch", cfg.patch.to_string()),
        ("backbone.layer_ids", layer_ids.join(",")),
        ("grid.h", cfg.grid_h.to_string()),
        ("grid.w", cfg.grid_w.to_string()),
        ("model.classes", cfg.classes.to_string()),
    ];
    for line in body.lines() {
        if let Some((key, value)) = line.split_once('=') {
            let (key, value) = (key.trim(), value.trim());
            if let Some((_, want)) = expect.iter().find(|(k, _)| *k == key) {
                if value != want {
                    return Err(RunError::MetaMismatch {
                        key: key.to_string(),
                        dataset: value.to_string(),
                        config: want.clone(),
                    });
                }
            }
        }
    }
    Ok(())
}

// ── Shared forward/eval plumbing ────────────────────────────────────

fn batch_scenes(scenes: &[&SceneRecord]) -> (FeatureStack, LabelMap) {
    let stacks: Vec<&FeatureStack> = scenes.iter().map(|s| &s.stack).collect();
    let labels: Vec<&LabelMap> = scenes.iter().map(|s| &s.labels).collect();
    (FeatureStack::stack(&stacks), LabelMap::stack(&labels))
}

/// Forward plus full objective on a fresh tape. Returns the breakdown, the
/// total's tape id, and the pass handles.
fn forward_loss(
    tape: &mut GradTape,
    stack: &FeatureStack,
    labels: &LabelMap,
    params: &DecoderParams,
    mode: FusionMode,
    loss_cfg: &loss::LossConfig,
) -> Result<(LossBreakdown, crate::tape::ValueId, decoder::ForwardPass), RunError> {
    let pass = decoder::forward(tape, stack, params, mode)?;
    let probs = tape.softmax_channels(pass.logits)?;
    let (breakdown, total) =
        loss::total_loss(tape, probs, labels, pass.weights, &pass.weight_matrices, loss_cfg)?;
    Ok((breakdown, total, pass))
}

fn argmax_labels(tape: &GradTape, logits: crate::tape::ValueId) -> LabelMap {
    let t = tape.value(logits);
    let s = t.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let pixels = h * w;
    let data = t.data();
    let mut ids = vec![0u8; b * pixels];
    for bi in 0..b {
        for p in 0..pixels {
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for ci in 0..c {
                let v = data[(bi * c + ci) * pixels + p];
                if v > best_v {
                    best_v = v;
                    best = ci;
                }
            }
            ids[bi * pixels + p] = best as u8;
        }
    }
    LabelMap::new([b, h, w], ids, c).expect("argmax ids in range")
}

/// Evaluation-mode pass over a scene list: confusion matrix at patch
/// resolution.
pub fn evaluate(
    params: &DecoderParams,
    mode: FusionMode,
    scenes: &[SceneRecord],
    batch: usize,
) -> Result<ConfusionMatrix, RunError> {
    let mut cm = ConfusionMatrix::new(params.cfg.classes);
    for chunk in scenes.chunks(batch.max(1)) {
        let refs: Vec<&SceneRecord> = chunk.iter().collect();
        let (stack, labels) = batch_scenes(&refs);
        let mut tape = GradTape::new();
        let pass = decoder::forward(&mut tape, &stack, params, mode)?;
        let pred = argmax_labels(&tape, pass.logits);
        cm.accumulate(&pred, &labels)?;
    }
    Ok(cm)
}

// ── train ───────────────────────────────────────────────────────────

pub struct TrainSummary {
    pub steps: usize,
    pub first: LossBreakdown,
    pub last: LossBreakdown,
    pub best_val_miou: f64,
    pub train_accuracy: f64,
    pub loss_csv: PathBuf,
    pub final_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

/// Full training run: shuffled micro-batches, gradient accumulation,
/// AdamW with cosine annealing, per-step loss log, best-val checkpoint.
pub fn cmd_train(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<TrainSummary, RunError> {
    check_meta(cfg, data_dir)?;
    let train_scenes = data::load_split(data_dir, Split::Train, &cfg.layer_ids, cfg.classes)?;
    let val_scenes = data::load_split(data_dir, Split::Val, &cfg.layer_ids, cfg.classes)?;
    create_dir(out)?;
    train_loop(cfg, cfg.mode, &train_scenes, &val_scenes, out)
}

fn train_loop(
    cfg: &RunConfig,
    mode: FusionMode,
    train_scenes: &[SceneRecord],
    val_scenes: &[SceneRecord],
    out: &Path,
) -> Result<TrainSummary, RunError> {
    let mut params = DecoderParams::init(&cfg.decoder_config(), cfg.seed);
    let trainable = params.trainable_names(mode);
    let sizes: Vec<usize> = trainable.iter().map(|n| params.get(n).len()).collect();
    let mut state = OptimizerState::new(&sizes);
    let mut accumulator = GradAccumulator::new(&sizes);

    let n_micro_per_epoch = train_scenes.len().div_ceil(cfg.batch);
    let steps_per_epoch = n_micro_per_epoch.div_ceil(cfg.accumulation);
    let total_steps = if cfg.steps > 0 { cfg.steps } else { cfg.epochs * steps_per_epoch };

    let loss_csv_path = out.join("loss.csv");
    let final_ckpt = out.join("checkpoint_final.dwfc");
    let best_ckpt = out.join("checkpoint_best.dwfc");
    let mut loss_csv = String::from(LossBreakdown::CSV_HEADER);
    loss_csv.push('\n');

    let mut first: Option<LossBreakdown> = None;
    let mut last = LossBreakdown::compose(0.0, 0.0, 0.0, 0.0, &cfg.loss);
    let mut best_val = f64::NEG_INFINITY;
    let mut window: Vec<LossBreakdown> = Vec::new();
    let mut step = 0usize;

    let save_both = |params: &DecoderParams, state: &OptimizerState| -> Result<(), RunError> {
        optim::save_checkpoint(&final_ckpt, params, state, &mode.label(), &trainable)?;
        Ok(())
    };
    // A freshly initialized model is a valid "last good" state.
    save_both(&params, &state)?;
    optim::save_checkpoint(&best_ckpt, &params, &state, &mode.label(), &trainable)?;

    'outer: for epoch in 0.. {
        if step >= total_steps {
            break;
        }
        if cfg.steps == 0 && epoch >= cfg.epochs {
            break;
        }
        let mut order: Vec<usize> = (0..train_scenes.len()).collect();
        let mut rng =
            ChaCha20Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE ^ (epoch as u64) << 20));
        order.shuffle(&mut rng);

        for (mi, chunk) in order.chunks(cfg.batch).enumerate() {
            let refs: Vec<&SceneRecord> = chunk.iter().map(|&i| &train_scenes[i]).collect();
            let (stack, labels) = batch_scenes(&refs);
            let mut tape = GradTape::new();
            let (breakdown, total, pass) =
                forward_loss(&mut tape, &stack, &labels, &params, mode, &cfg.loss)?;
            if !breakdown.total.is_finite() {
                return Err(RunError::NonFiniteLoss { step: step + 1 });
            }
            tape.backward(total);
            let grads: Vec<Vec<f64>> = pass
                .params
                .iter()
                .map(|(name, id)| {
                    tape.grad(*id).unwrap_or_else(|| panic!("no gradient for {name}")).to_vec()
                })
                .collect();
            accumulator.add(&grads);
            window.push(breakdown);

            let window_full = accumulator.count == cfg.accumulation;
            let last_micro = mi + 1 == order.chunks(cfg.batch).count();
            if window_full || last_micro {
                let mean_grads = accumulator.take_mean();
                let lr = cosine_lr(step, total_steps.max(1), cfg.optim.lr_max, cfg.optim.lr_min);
                optim::adamw_step_params(&mut state, &mut params, &trainable, &mean_grads, lr, &cfg.optim)
                    .map_err(|e| match e {
                        OptimError::NonFiniteGrad(_) => RunError::NonFiniteLoss { step: step + 1 },
                        other => RunError::Optim(other),
                    })?;
                step += 1;
                let averaged = mean_breakdown(&window, &cfg.loss);
                window.clear();
                loss_csv.push_str(&averaged.csv_row(step));
                loss_csv.push('\n');
                if first.is_none() {
                    first = Some(averaged);
                }
                last = averaged;
                if step >= total_steps {
                    break 'outer;
                }
            }
        }

        // Epoch end: refresh the final checkpoint and track the best val mIoU.
        save_both(&params, &state)?;
        if !val_scenes.is_empty() {
            let cm = evaluate(&params, mode, val_scenes, cfg.batch)?;
            let miou = metrics::report(&cm).m_iou;
            if miou > best_val {
                best_val = miou;
                optim::save_checkpoint(&best_ckpt, &params, &state, &mode.label(), &trainable)?;
            }
        }
    }

    save_both(&params, &state)?;
    if best_val == f64::NEG_INFINITY && !val_scenes.is_empty() {
        let cm = evaluate(&params, mode, val_scenes, cfg.batch)?;
        best_val = metrics::report(&cm).m_iou;
        optim::save_checkpoint(&best_ckpt, &params, &state, &mode.label(), &trainable)?;
    }
    write_file(&loss_csv_path, &loss_csv)?;

    let train_cm = evaluate(&params, mode, train_scenes, cfg.batch)?;
    let train_accuracy = train_cm.pixel_accuracy();
    let first = first.unwrap_or(last);
    let summary = format!(
        "mode = {}\nsteps = {step}\nfirst_total = {}\nlast_total = {}\nfirst_seg = {}\nlast_seg = {}\nbest_val_miou = {}\ntrain_pixel_accuracy = {}\n",
        mode.label(),
        first.total,
        last.total,
        first.seg,
        last.seg,
        if best_val == f64::NEG_INFINITY { 0.0 } else { best_val },
        train_accuracy,
    );
    write_file(&out.join("summary.txt"), summary)?;

    Ok(TrainSummary {
        steps: step,
        first,
        last,
        best_val_miou: if best_val == f64::NEG_INFINITY { 0.0 } else { best_val },
        train_accuracy,
        loss_csv: loss_csv_path,
        final_checkpoint: final_ckpt,
        best_checkpoint: best_ckpt,
    })
}

fn mean_breakdown(window: &[LossBreakdown], cfg: &loss::LossConfig) -> LossBreakdown {
    let n = window.len().max(1) as f64;
    let dice = window.iter().map(|b| b.dice).sum::<f64>() / n;
    let focal = window.iter().map(|b| b.focal).sum::<f64>() / n;
    let l2 = window.iter().map(|b| b.l2).sum::<f64>() / n;
    let entropy = window.iter().map(|b| b.entropy).sum::<f64>() / n;
    LossBreakdown::compose(dice, focal, l2, entropy, cfg)
}

// ── ablate ──────────────────────────────────────────────────────────

pub struct AblateRow {
    pub mode: FusionMode,
    pub report: ClassReport,
    pub final_total: f64,
    pub final_seg: f64,
}

pub struct AblateSummary {
    pub rows: Vec<AblateRow>,
}

/// Trains all six fusion variants under identical settings and seed, then
/// evaluates each on the test split.
pub fn cmd_ablate(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<AblateSummary, RunError> {
    check_meta(cfg, data_dir)?;
    let train_scenes = data::load_split(data_dir, Split::Train, &cfg.layer_ids, cfg.classes)?;
    let val_scenes = data::load_split(data_dir, Split::Val, &cfg.layer_ids, cfg.classes)?;
    let test_scenes = data::load_split(data_dir, Split::Test, &cfg.layer_ids, cfg.classes)?;
    create_dir(out)?;

    let mut rows = Vec::new();
    for mode in FusionMode::ablation_suite(cfg.m()) {
        let run_dir = out.join(mode.label());
        create_dir(&run_dir)?;
        let summary = train_loop(cfg, mode, &train_scenes, &val_scenes, &run_dir)?;
        let ckpt = optim::load_checkpoint(&summary.final_checkpoint, Some(&cfg.decoder_config()))?;
        let cm = evaluate(&ckpt.params, mode, &test_scenes, cfg.batch)?;
        let report = metrics::report(&cm);
        write_file(&run_dir.join("metrics.csv"), metrics::report_csv(&report))?;
        rows.push(AblateRow {
            mode,
            report,
            final_total: summary.last.total,
            final_seg: summary.last.seg,
        });
    }

    let mut table = String::from("method,mPrecision,mRecall,mF1,mIoU\n");
    for row in &rows {
        table.push_str(&format!(
            "{},{},{},{},{}\n",
            row.mode.label(),
            row.report.m_precision,
            row.report.m_recall,
            row.report.m_f1,
            row.report.m_iou
        ));
    }
    write_file(&out.join("ablation.csv"), &table)?;

    // Per-class table, one column pair per method.
    let mut classes_csv = String::from("class,abbrev");
    for row in &rows {
        classes_csv.push_str(&format!(",{}_f1,{}_iou", row.mode.label(), row.mode.label()));
    }
    classes_csv.push('\n');
    for c in 0..cfg.classes {
        classes_csv.push_str(&format!("{c},{}", data::class_abbrev(c)));
        for row in &rows {
            let m = &row.report.per_class[c];
            classes_csv.push_str(&format!(",{},{}", m.f1, m.iou));
        }
        classes_csv.push('\n');
    }
    write_file(&out.join("ablation_classes.csv"), &classes_csv)?;

    let mut loss_csv = String::from("method,final_total,final_seg\n");
    for row in &rows {
        loss_csv.push_str(&format!("{},{},{}\n", row.mode.label(), row.final_total, row.final_seg));
    }
    write_file(&out.join("ablation_loss.csv"), &loss_csv)?;

    Ok(AblateSummary { rows })
}

// ── eval ────────────────────────────────────────────────────────────

fn split_from_name(name: &str) -> Split {
    match name {
        "train" => Split::Train,
        "val" => Split::Val,
        _ => Split::Test,
    }
}

/// Evaluates a checkpoint on the configured split, emitting the per-class
/// CSV and an aligned text table.
pub fn cmd_eval(
    cfg: &RunConfig,
    data_dir: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<ClassReport, RunError> {
    check_meta(cfg, data_dir)?;
    let ckpt = optim::load_checkpoint(checkpoint, Some(&cfg.decoder_config()))?;
    let mode = FusionMode::parse(&ckpt.mode_label).unwrap_or(cfg.mode);
    let scenes =
        data::load_split(data_dir, split_from_name(&cfg.eval_split), &cfg.layer_ids, cfg.classes)?;
    let cm = evaluate(&ckpt.params, mode, &scenes, cfg.batch)?;
    let report = metrics::report(&cm);
    create_dir(out)?;
    write_file(&out.join("metrics.csv"), metrics::report_csv(&report))?;
    write_file(&out.join("metrics.txt"), metrics::report_table(&report))?;
    Ok(report)
}

// ── entropy ─────────────────────────────────────────────────────────

pub struct EntropySummary {
    pub records: Vec<entropy::WeightRecord>,
    pub histogram: Vec<usize>,
}

/// Collects per-image weight records from a checkpoint and writes the full
/// analysis artifact set.
pub fn cmd_entropy(
    cfg: &RunConfig,
    data_dir: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<EntropySummary, RunError> {
    check_meta(cfg, data_dir)?;
    let ckpt = optim::load_checkpoint(checkpoint, Some(&cfg.decoder_config()))?;
    let mode = FusionMode::parse(&ckpt.mode_label).unwrap_or(cfg.mode);
    let scenes = data::load_split(
        data_dir,
        split_from_name(&cfg.entropy_split),
        &cfg.layer_ids,
        cfg.classes,
    )?;
    let records = entropy::collect_records(&ckpt.params, mode, &scenes)?;
    create_dir(out)?;
    write_file(&out.join("records.csv"), entropy::records_csv(&records))?;
    let groups = entropy::entropy_vs_diversity(&records)?;
    write_file(&out.join("diversity.csv"), entropy::diversity_csv(&groups))?;
    let histogram = entropy::entropy_histogram(&records, cfg.entropy_bins, cfg.m())?;
    write_file(&out.join("histogram.csv"), entropy::histogram_csv(&histogram, cfg.m()))?;
    write_file(&out.join("histogram.svg"), entropy::histogram_svg(&histogram, cfg.m()))?;
    for record in &records {
        write_file(
            &out.join(format!("weights_{}.svg", record.id)),
            entropy::weights_svg(record, &cfg.layer_ids),
        )?;
    }
    Ok(EntropySummary { records, histogram })
}

// ── gradcheck ───────────────────────────────────────────────────────

pub struct GradCheckSummary {
    pub report: GradCheckReport,
    pub passed: bool,
}

/// Builds a small synthetic batch at the configured dimensions and checks
/// the analytic gradient of the full model + objective against central
/// differences.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradCheckSummary, RunError> {
    gradcheck_mode(cfg, cfg.mode)
}

pub fn gradcheck_mode(cfg: &RunConfig, mode: FusionMode) -> Result<GradCheckSummary, RunError> {
    let backbone = SurrogateBackbone::new(cfg.backbone_seed, cfg.c_in, cfg.patch, cfg.m());
    let mut stacks = Vec::new();
    let mut label_list = Vec::new();
    for i in 0..cfg.gradcheck_batch {
        let scene_seed = derive_seed(cfg.seed, STREAM_SCENE ^ (i as u64) << 16);
        let class_count = (cfg.min_classes + i).min(cfg.max_classes);
        let (image, labels) = data::generate_scene_pooled(
            scene_seed,
            cfg.grid_h,
            cfg.grid_w,
            class_count,
            cfg.patch,
            cfg.noise,
            cfg.classes,
        )?;
        stacks.push(backbone.extract(&image, &cfg.layer_ids)?);
        label_list.push(labels);
    }
    let stack = FeatureStack::stack(&stacks.iter().collect::<Vec<_>>());
    let labels = LabelMap::stack(&label_list.iter().collect::<Vec<_>>());

    let params = DecoderParams::init(&cfg.decoder_config(), cfg.seed);
    let trainable = params.trainable_names(mode);

    // Analytic gradients from one tape pass.
    let mut tape = GradTape::new();
    let (_, total, pass) = forward_loss(&mut tape, &stack, &labels, &params, mode, &cfg.loss)?;
    tape.backward(total);
    let analytic: Vec<Vec<f64>> = pass
        .params
        .iter()
        .map(|(name, id)| tape.grad(*id).unwrap_or_else(|| panic!("no gradient for {name}")).to_vec())
        .collect();
    let tensors: Vec<Tensor> = trainable.iter().map(|n| params.get(n).clone()).collect();

    // Independent re-evaluation for each probe.
    let eval = |probe: &[Tensor]| -> f64 {
        let mut candidate = params.clone();
        for (name, tensor) in trainable.iter().zip(probe) {
            *candidate.get_mut(name) = tensor.clone();
        }
        let mut tape = GradTape::new();
        let (breakdown, _, _) =
            forward_loss(&mut tape, &stack, &labels, &candidate, mode, &cfg.loss)
                .expect("gradcheck forward");
        breakdown.total
    };

    let opts = GradCheckOptions {
        step: cfg.gradcheck_step,
        max_coords_per_tensor: if cfg.gradcheck_max_coords == 0 {
            None
        } else {
            Some(cfg.gradcheck_max_coords)
        },
    };
    let report = grad_check(eval, &tensors, &analytic, &opts)?;
    let passed = report.max_rel_err < GRADCHECK_TOL;
    Ok(GradCheckSummary { report, passed })
}
