//! Feature and label supply: a deterministic surrogate for the frozen
//! multi-level backbone, a synthetic scene generator, the 6:1:1 dataset
//! split, and the on-disk dataset layout built on DWF1 files.
//!
//! The surrogate replaces a real vision transformer: per level it applies a
//! fixed seeded 1×1 channel mixing, then one more 3×3 spatial averaging pass
//! than the previous level (so deeper levels have strictly larger receptive
//! fields and smoother, more context-mixed maps), then a fixed tanh. Nothing
//! in it ever trains.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::io::{self, FormatError};
use crate::tensor::Tensor;

/// The fixed habitat class table: id order is contract for all reports.
pub const CLASSES: [(&str, &str); 15] = [
    ("Pf", "Paddy field"),
    ("Dl", "Dry land"),
    ("Wa", "Woody area"),
    ("Fb", "Forest belt"),
    ("Asg", "Arbor-shrub-grass compound"),
    ("St", "Scattered trees"),
    ("Gb", "Grass belt"),
    ("Tf", "Tidal flats"),
    ("River", "River"),
    ("Water", "Water"),
    ("Pr", "Paved road"),
    ("Dr", "Dirt road"),
    ("Cl", "Construction land"),
    ("Ul", "Unused land"),
    ("Ridge", "Ridge"),
];

pub const NUM_CLASSES: usize = CLASSES.len();

/// Classes rendered as thin full-span strips (linear habitats).
const STRIP_CLASSES: [usize; 5] = [6, 8, 10, 11, 14];

/// Fixed RGB palette used to paint synthetic scenes: cube corners, face
/// centers, and the center, so every class pair is at least 0.4 apart and
/// stays separable after the surrogate's spatial mixing.
const PALETTE: [[f64; 3]; 15] = [
    [0.1, 0.1, 0.1],
    [0.9, 0.1, 0.1],
    [0.1, 0.9, 0.1],
    [0.1, 0.1, 0.9],
    [0.9, 0.9, 0.1],
    [0.9, 0.1, 0.9],
    [0.1, 0.9, 0.9],
    [0.9, 0.9, 0.9],
    [0.5, 0.5, 0.5],
    [0.5, 0.5, 0.1],
    [0.5, 0.1, 0.5],
    [0.1, 0.5, 0.5],
    [0.5, 0.5, 0.9],
    [0.5, 0.9, 0.5],
    [0.9, 0.5, 0.5],
];

pub fn class_abbrev(id: usize) -> &'static str {
    CLASSES[id].0
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("class count {0} out of range [1, {max}]", max = NUM_CLASSES)]
    ClassCountOutOfRange(usize),
    #[error("dataset needs at least 8 items, got {0}")]
    TooFewItems(usize),
    #[error("image size {h}x{w} not divisible by patch {patch}")]
    IndivisibleImage { h: usize, w: usize, patch: usize },
    #[error("layer ids must be strictly increasing, got {0:?}")]
    LayerIdsNotIncreasing(Vec<u32>),
    #[error("label id {id} exceeds class count {classes}")]
    LabelOutOfRange { id: u8, classes: usize },
    #[error("missing label file {0}")]
    MissingLabelFile(String),
    #[error("missing feature file {0}")]
    MissingFeatureFile(String),
    #[error("missing split manifest {0}")]
    MissingManifest(String),
    #[error("level shape mismatch: {left:?} vs {right:?}")]
    LevelShapeMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

/// Per-pixel class ids at patch resolution, shaped B×H_p×W_p.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    shape: [usize; 3],
    ids: Vec<u8>,
}

impl LabelMap {
    pub fn new(shape: [usize; 3], ids: Vec<u8>, classes: usize) -> Result<Self, DataError> {
        debug_assert_eq!(shape.iter().product::<usize>(), ids.len());
        if let Some(&bad) = ids.iter().find(|&&id| (id as usize) >= classes) {
            return Err(DataError::LabelOutOfRange { id: bad, classes });
        }
        Ok(LabelMap { shape, ids })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn ids(&self) -> &[u8] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of distinct class ids present.
    pub fn distinct_classes(&self) -> usize {
        let mut seen = [false; NUM_CLASSES];
        for &id in &self.ids {
            seen[id as usize] = true;
        }
        seen.iter().filter(|&&s| s).count()
    }

    /// Concatenates label maps along the batch axis.
    pub fn stack(maps: &[&LabelMap]) -> LabelMap {
        let [_, h, w] = maps[0].shape;
        let mut ids = Vec::new();
        let mut batch = 0;
        for m in maps {
            debug_assert_eq!([m.shape[1], m.shape[2]], [h, w]);
            ids.extend_from_slice(&m.ids);
            batch += m.shape[0];
        }
        LabelMap { shape: [batch, h, w], ids }
    }
}

/// Ordered multi-level feature maps plus their source layer indices.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    pub levels: Vec<Tensor>,
    pub layer_ids: Vec<u32>,
}

impl FeatureStack {
    pub fn new(levels: Vec<Tensor>, layer_ids: Vec<u32>) -> Result<Self, DataError> {
        if !layer_ids.windows(2).all(|w| w[0] < w[1]) {
            return Err(DataError::LayerIdsNotIncreasing(layer_ids));
        }
        let first = levels[0].shape().to_vec();
        for l in &levels {
            if l.shape() != first.as_slice() {
                return Err(DataError::LevelShapeMismatch {
                    left: first,
                    right: l.shape().to_vec(),
                });
            }
        }
        Ok(FeatureStack { levels, layer_ids })
    }

    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    /// Batch size of each level.
    pub fn batch(&self) -> usize {
        self.levels[0].shape()[0]
    }

    /// Concatenates stacks along the batch axis (levels must agree).
    pub fn stack(stacks: &[&FeatureStack]) -> FeatureStack {
        let m = stacks[0].level_count();
        let layer_ids = stacks[0].layer_ids.clone();
        let mut levels = Vec::with_capacity(m);
        for li in 0..m {
            let mut shape = stacks[0].levels[li].shape().to_vec();
            let mut data = Vec::new();
            let mut batch = 0;
            for s in stacks {
                data.extend_from_slice(s.levels[li].data());
                batch += s.levels[li].shape()[0];
            }
            shape[0] = batch;
            levels.push(Tensor::new(shape, data).expect("stacked level"));
        }
        FeatureStack { levels, layer_ids }
    }
}

/// Mixes a base seed with a stream tag (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Frozen random feature extractor standing in for a pretrained backbone.
///
/// Same seed plus same image gives a bit-identical stack; the parameters are
/// derived from the seed alone, so the determinism survives process restarts.
pub struct SurrogateBackbone {
    pub seed: u64,
    pub c_in: usize,
    pub patch: usize,
    /// Per level: C_in×3 mixing matrix and C_in bias, never trained.
    mixes: Vec<(Vec<f64>, Vec<f64>)>,
}

impl SurrogateBackbone {
    pub fn new(seed: u64, c_in: usize, patch: usize, level_count: usize) -> Self {
        let mut mixes = Vec::with_capacity(level_count);
        for level in 0..level_count {
            let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, 0x6261636B ^ level as u64));
            let mat: Vec<f64> = (0..c_in * 3).map(|_| rng.gen_range(-1.2..1.2)).collect();
            let bias: Vec<f64> = (0..c_in).map(|_| rng.gen_range(-0.4..0.4)).collect();
            mixes.push((mat, bias));
        }
        SurrogateBackbone { seed, c_in, patch, mixes }
    }

    pub fn level_count(&self) -> usize {
        self.mixes.len()
    }

    /// Extracts one feature map per level from a B×3×H×W image.
    pub fn extract(&self, image: &Tensor, layer_ids: &[u32]) -> Result<FeatureStack, DataError> {
        assert_eq!(layer_ids.len(), self.mixes.len(), "one mix per level");
        let s = image.shape();
        assert_eq!(s.len(), 4, "image must be B×3×H×W");
        let (batch, h, w) = (s[0], s[2], s[3]);
        if h % self.patch != 0 || w % self.patch != 0 {
            return Err(DataError::IndivisibleImage { h, w, patch: self.patch });
        }
        let hp = h / self.patch;
        let wp = w / self.patch;
        let patched = self.patchify(image, batch, h, w, hp, wp);
        let mut levels = Vec::with_capacity(self.mixes.len());
        for (li, (mat, bias)) in self.mixes.iter().enumerate() {
            let mut z = self.channel_mix(&patched, batch, hp, wp, mat, bias);
            for _ in 0..=li {
                z = average_pass(&z, batch, self.c_in, hp, wp);
            }
            for v in &mut z {
                *v = v.tanh();
            }
            levels.push(Tensor::new(vec![batch, self.c_in, hp, wp], z).expect("level shape"));
        }
        FeatureStack::new(levels, layer_ids.to_vec())
    }

    /// Mean over each patch per input channel: B×3×H×W → B×3×H_p×W_p.
    fn patchify(
        &self,
        image: &Tensor,
        batch: usize,
        h: usize,
        w: usize,
        hp: usize,
        wp: usize,
    ) -> Vec<f64> {
        let p = self.patch;
        let data = image.data();
        let mut out = vec![0.0; batch * 3 * hp * wp];
        let inv = 1.0 / (p * p) as f64;
        for b in 0..batch {
            for c in 0..3 {
                for ph in 0..hp {
                    for pw in 0..wp {
                        let mut acc = 0.0;
                        for dy in 0..p {
                            for dx in 0..p {
                                let y = ph * p + dy;
                                let x = pw * p + dx;
                                acc += data[((b * 3 + c) * h + y) * w + x];
                            }
                        }
                        out[((b * 3 + c) * hp + ph) * wp + pw] = acc * inv;
                    }
                }
            }
        }
        out
    }

    fn channel_mix(
        &self,
        patched: &[f64],
        batch: usize,
        hp: usize,
        wp: usize,
        mat: &[f64],
        bias: &[f64],
    ) -> Vec<f64> {
        let pixels = hp * wp;
        let mut out = vec![0.0; batch * self.c_in * pixels];
        for b in 0..batch {
            for o in 0..self.c_in {
                let dst = &mut out[(b * self.c_in + o) * pixels..(b * self.c_in + o + 1) * pixels];
                dst.fill(bias[o]);
                for c in 0..3 {
                    let coeff = mat[o * 3 + c];
                    let src = &patched[(b * 3 + c) * pixels..(b * 3 + c + 1) * pixels];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += coeff * s;
                    }
                }
            }
        }
        out
    }
}

/// One center-weighted 3×3 averaging pass with replicated borders.
/// Center keeps weight 3/4; each neighbour contributes 1/32. Stacked passes
/// widen the receptive field while the first level stays nearly cell-pure.
fn average_pass(x: &[f64], batch: usize, channels: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for bc in 0..batch * channels {
        let src = &x[bc * h * w..(bc + 1) * h * w];
        let dst = &mut out[bc * h * w..(bc + 1) * h * w];
        for y in 0..h {
            for xw in 0..w {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (xw as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        let weight = if dy == 0 && dx == 0 { 0.75 } else { 0.03125 };
                        acc += weight * src[yy * w + xx];
                    }
                }
                dst[y * w + xw] = acc;
            }
        }
    }
    out
}

/// Builds a synthetic labelled scene at patch resolution plus its image.
///
/// The label grid is painted from seeded blobs and strips (strips stand in
/// for linear habitats) over a base class, then one anchor cell per chosen
/// class guarantees the output covers exactly `class_count` distinct ids.
/// The image is the class palette upsampled by `patch` plus seeded noise.
pub fn generate_scene(
    seed: u64,
    hp: usize,
    wp: usize,
    class_count: usize,
    patch: usize,
    noise: f64,
) -> Result<(Tensor, LabelMap), DataError> {
    generate_scene_pooled(seed, hp, wp, class_count, patch, noise, NUM_CLASSES)
}

/// Like [`generate_scene`] but draws ids from `[0, pool)` for runs that use
/// fewer than the full 15 classes.
pub fn generate_scene_pooled(
    seed: u64,
    hp: usize,
    wp: usize,
    class_count: usize,
    patch: usize,
    noise: f64,
    pool: usize,
) -> Result<(Tensor, LabelMap), DataError> {
    if class_count == 0 || class_count > pool || pool > NUM_CLASSES {
        return Err(DataError::ClassCountOutOfRange(class_count));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, 0x7363656E));
    let mut all_ids: Vec<u8> = (0..pool as u8).collect();
    all_ids.shuffle(&mut rng);
    let chosen = &all_ids[..class_count];

    let mut grid = vec![chosen[0]; hp * wp];
    for &id in &chosen[1..] {
        if STRIP_CLASSES.contains(&(id as usize)) {
            paint_strip(&mut grid, hp, wp, id, &mut rng);
        } else {
            paint_blob(&mut grid, hp, wp, id, &mut rng);
        }
    }
    // Anchor one distinct cell per chosen class so every id survives overpainting.
    let mut cells: Vec<usize> = (0..hp * wp).collect();
    cells.shuffle(&mut rng);
    for (i, &id) in chosen.iter().enumerate() {
        grid[cells[i]] = id;
    }

    let (h, w) = (hp * patch, wp * patch);
    let mut image = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let cell = grid[(y / patch) * wp + (x / patch)] as usize;
            for c in 0..3 {
                let v = PALETTE[cell][c] + rng.gen_range(-noise..=noise);
                image[(c * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    let image = Tensor::new(vec![1, 3, h, w], image).expect("image shape");
    let labels = LabelMap::new([1, hp, wp], grid, pool)?;
    Ok((image, labels))
}

fn paint_strip(grid: &mut [u8], hp: usize, wp: usize, id: u8, rng: &mut ChaCha20Rng) {
    let horizontal = rng.gen_bool(0.5);
    let width = rng.gen_range(1..=2usize);
    if horizontal {
        let row = rng.gen_range(0..hp);
        for dy in 0..width {
            let y = (row + dy).min(hp - 1);
            for x in 0..wp {
                grid[y * wp + x] = id;
            }
        }
    } else {
        let col = rng.gen_range(0..wp);
        for dx in 0..width {
            let x = (col + dx).min(wp - 1);
            for y in 0..hp {
                grid[y * wp + x] = id;
            }
        }
    }
}

fn paint_blob(grid: &mut [u8], hp: usize, wp: usize, id: u8, rng: &mut ChaCha20Rng) {
    let cy = rng.gen_range(0..hp) as f64;
    let cx = rng.gen_range(0..wp) as f64;
    let ry = rng.gen_range(1.0..=(hp as f64 / 3.0).max(1.5));
    let rx = rng.gen_range(1.0..=(wp as f64 / 3.0).max(1.5));
    for y in 0..hp {
        for x in 0..wp {
            let dy = (y as f64 - cy) / ry;
            let dx = (x as f64 - cx) / rx;
            if dy * dy + dx * dx <= 1.0 {
                grid[y * wp + x] = id;
            }
        }
    }
}

/// Scene ids of the train, val, and test splits.
pub type SplitIds = (Vec<usize>, Vec<usize>, Vec<usize>);

/// Splits `n_items` into train/val/test by a seeded shuffle and
/// largest-remainder rounding of the ratio.
pub fn split_dataset(
    n_items: usize,
    ratio: (usize, usize, usize),
    seed: u64,
) -> Result<SplitIds, DataError> {
    if n_items < 8 {
        return Err(DataError::TooFewItems(n_items));
    }
    let parts = [ratio.0, ratio.1, ratio.2];
    let total: usize = parts.iter().sum();
    let mut sizes = [0usize; 3];
    let mut fractions = [(0.0f64, 0usize); 3];
    let mut assigned = 0;
    for i in 0..3 {
        let exact = n_items as f64 * parts[i] as f64 / total as f64;
        sizes[i] = exact.floor() as usize;
        fractions[i] = (exact - exact.floor(), i);
        assigned += sizes[i];
    }
    let mut order = fractions;
    order.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for k in 0..n_items - assigned {
        sizes[order[k % 3].1] += 1;
    }
    let mut ids: Vec<usize> = (0..n_items).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, 0x73706C69));
    ids.shuffle(&mut rng);
    let train = ids[..sizes[0]].to_vec();
    let val = ids[sizes[0]..sizes[0] + sizes[1]].to_vec();
    let test = ids[sizes[0] + sizes[1]..].to_vec();
    Ok((train, val, test))
}

// ── On-disk dataset layout ──────────────────────────────────────────
//
// <root>/<split>/<id>/level_<k>.dwf   one float32 tensor per level
// <root>/<split>/<id>/label.dwf      one uint8 grid
// <root>/{train,val,test}.txt        manifest of scene ids, one per line

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One scene loaded into memory: per-level feature maps (batch 1) + labels.
#[derive(Debug, Clone)]
pub struct SceneRecord {
    pub id: usize,
    pub stack: FeatureStack,
    pub labels: LabelMap,
}

pub fn scene_dir(root: &Path, split: Split, id: usize) -> PathBuf {
    root.join(split.name()).join(id.to_string())
}

pub fn save_scene(
    root: &Path,
    split: Split,
    id: usize,
    stack: &FeatureStack,
    labels: &LabelMap,
) -> Result<(), DataError> {
    let dir = scene_dir(root, split, id);
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    for (level, &layer) in stack.levels.iter().zip(&stack.layer_ids) {
        io::write_tensor_file(&dir.join(format!("level_{layer}.dwf")), level)?;
    }
    let [b, h, w] = labels.shape();
    io::write_label_file(&dir.join("label.dwf"), &[b, h, w], labels.ids())?;
    Ok(())
}

pub fn load_scene(
    root: &Path,
    split: Split,
    id: usize,
    layer_ids: &[u32],
    classes: usize,
) -> Result<SceneRecord, DataError> {
    let dir = scene_dir(root, split, id);
    let mut levels = Vec::with_capacity(layer_ids.len());
    for &layer in layer_ids {
        let path = dir.join(format!("level_{layer}.dwf"));
        if !path.exists() {
            return Err(DataError::MissingFeatureFile(path.display().to_string()));
        }
        levels.push(io::read_tensor_file(&path)?);
    }
    let label_path = dir.join("label.dwf");
    if !label_path.exists() {
        return Err(DataError::MissingLabelFile(label_path.display().to_string()));
    }
    let (shape, ids) = io::read_label_file(&label_path)?;
    if shape.len() != 3 {
        return Err(FormatError::RankMismatch { expected: 3, found: shape.len() }.into());
    }
    let labels = LabelMap::new([shape[0], shape[1], shape[2]], ids, classes)?;
    Ok(SceneRecord { id, stack: FeatureStack::new(levels, layer_ids.to_vec())?, labels })
}

pub fn write_manifest(root: &Path, split: Split, ids: &[usize]) -> Result<(), DataError> {
    let path = root.join(format!("{}.txt", split.name()));
    let mut body = String::new();
    for id in ids {
        body.push_str(&id.to_string());
        body.push('\n');
    }
    fs::write(&path, body).map_err(|e| io_err(&path, e))
}

pub fn read_manifest(root: &Path, split: Split) -> Result<Vec<usize>, DataError> {
    let path = root.join(format!("{}.txt", split.name()));
    if !path.exists() {
        return Err(DataError::MissingManifest(path.display().to_string()));
    }
    let body = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    Ok(body.lines().filter(|l| !l.is_empty()).map(|l| l.parse().expect("manifest id")).collect())
}

/// Loads every scene of a split, ordered by manifest position.
pub fn load_split(
    root: &Path,
    split: Split,
    layer_ids: &[u32],
    classes: usize,
) -> Result<Vec<SceneRecord>, DataError> {
    let ids = read_manifest(root, split)?;
    ids.into_iter().map(|id| load_scene(root, split, id, layer_ids, classes)).collect()
}
