//! Direction-filtered training of the cell decoders.
//!
//! Each direction's decoder sees only the forgeries whose source-to-target
//! rotation falls in its bin; the upright decoder is afterwards continued on
//! zoom-patch pairs. Encoder features are computed once per frame and cached.
//!
//! Supervision has two modes. With `cells_per_sample = None`, the decoded grid
//! is bilinearly upsampled to pixel resolution and compared with the mask by
//! clamped binary cross-entropy. With `Some(k)`, `k` cells per pair are drawn
//! at random and each is compared with the mean of the mask over its pixel
//! footprint, which costs `k / G^2` of a full pass.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, TensorData};
use crate::decoder::{upsample_adjoint, upsample_values, CellDecoder, ClassifierArch, DecoderKind};
use crate::detector::{frame_image, postprocess, stream_candidates, ModelSet, PostprocessConfig, StreamResult};
use crate::encoder::{FeatureExtractor, FeatureMap};
use crate::error::{invalid_argument, Error, Result};
use crate::evalharness::pixel_metrics;
use crate::forgegen::{direction_bin, Dataset, Manifest};
use crate::imaging::{
    canonicalize, resize_mask_nearest, rotate_mask, zoom_patch_mask, GeomTransform, Image, Mask, Quadrant, Rotation,
    FIDUCIAL_SIZE,
};
use crate::nn::{sigmoid, Adam, Real};
use crate::similarity::{reshape_to_maps, similarity_matrix, Side, SimilarityTensor, DEFAULT_SCALE};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-7;
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const SCALE_LOG: &str = "scale_log.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Epochs between learning-rate halvings.
    pub lr_halving_period: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// First-moment decay ("momentum") of the optimizer.
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Cells supervised per pair, split evenly over the two sides.
    /// `None` supervises every pixel of the upsampled grid.
    pub cells_per_sample: Option<usize>,
    pub validation_fraction: f64,
    /// Validation pairs scored per epoch; `None` scores all of them.
    pub validation_limit: Option<usize>,
    /// Training pairs per run; `None` uses every pair in the bin.
    pub max_samples: Option<usize>,
    pub decoder: DecoderKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Single-machine settings: small batches, five epochs, compact decoder,
    /// 128 supervised cells per pair.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-4,
            lr_halving_period: 20,
            weight_decay: 5e-4,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 5,
            seed: 0,
            cells_per_sample: Some(128),
            validation_fraction: 0.1,
            validation_limit: Some(16),
            max_samples: None,
            decoder: DecoderKind::SimilarityMaps { arch: ClassifierArch::compact() },
        }
    }

    /// Full-width decoder, batch 64, dense pixel supervision.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 64,
            epochs: 60,
            cells_per_sample: None,
            validation_limit: None,
            decoder: DecoderKind::SimilarityMaps { arch: ClassifierArch::full() },
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if self.lr_halving_period == 0 {
            return bad("lr_halving_period must be at least 1");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        if self.cells_per_sample == Some(0) {
            return bad("cells_per_sample must be positive");
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * 0.5f64.powi((epoch / self.lr_halving_period) as i32)
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

fn bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Mean pixel binary cross-entropy of a probability mask against ground truth.
pub fn loss(pred: &Mask, gt: &Mask) -> Result<f64> {
    if pred.size() != gt.size() {
        return Err(invalid_argument(format!("prediction {:?} and ground truth {:?} differ in size", pred.size(), gt.size())));
    }
    let n = pred.data().len() as f64;
    Ok(pred.data().iter().zip(gt.data()).map(|(&p, &y)| bce(p as f64, y as f64)).sum::<f64>() / n)
}

/// Loss of a logit grid upsampled to `size x size` pixels, with its gradient
/// with respect to the logits.
pub fn grid_loss_and_grad<T: Real>(logits: &[T], grid: usize, gt: &[T], size: usize) -> (T, Vec<T>) {
    let probs: Vec<T> = logits.iter().map(|&z| sigmoid(z)).collect();
    let pixels = upsample_values(&probs, grid, size);
    let n = T::from_usize(pixels.len()).unwrap();
    let (lo, hi) = (T::lit(PROB_CLAMP), T::lit(1.0 - PROB_CLAMP));
    let mut total = T::zero();
    let mut dpix = Vec::with_capacity(pixels.len());
    for (&p, &y) in pixels.iter().zip(gt) {
        let pc = if p < lo { lo } else if p > hi { hi } else { p };
        total += -(y * pc.ln() + (T::one() - y) * (T::one() - pc).ln());
        dpix.push(if p < lo || p > hi { T::zero() } else { (pc - y) / (pc * (T::one() - pc)) / n });
    }
    let dgrid = upsample_adjoint(&dpix, grid, size);
    let dz = dgrid.iter().zip(&probs).map(|(&g, &p)| g * p * (T::one() - p)).collect();
    (total / n, dz)
}

/// Mean cross-entropy of cell logits against soft targets, with gradient.
pub fn cell_loss_and_grad(logits: &[f32], targets: &[f32]) -> (f64, Vec<f32>) {
    let n = logits.len() as f64;
    let mut total = 0.0;
    let grad = logits
        .iter()
        .zip(targets)
        .map(|(&z, &t)| {
            let (z64, t64) = (z as f64, t as f64);
            total += z64.max(0.0) - t64 * z64 + (-z64.abs()).exp().ln_1p();
            ((sigmoid(z64) - t64) / n) as f32
        })
        .collect();
    (total / n, grad)
}

/// Mean of `mask` over each cell's `size / grid` pixel block.
pub fn cell_targets(mask: &Mask, grid: usize) -> Result<Vec<f32>> {
    let (h, w) = mask.size();
    if h != w || grid == 0 || h % grid != 0 {
        return Err(invalid_argument(format!("a {h}x{w} mask does not tile into a {grid}x{grid} grid")));
    }
    let s = h / grid;
    let mut out = vec![0.0f32; grid * grid];
    for r in 0..h {
        for c in 0..w {
            out[(r / s) * grid + c / s] += mask.get(r, c);
        }
    }
    let area = (s * s) as f32;
    out.iter_mut().for_each(|v| *v /= area);
    Ok(out)
}

/// Ground truth seen through an augmented frame.
pub fn frame_mask(gt: &Mask, transform: GeomTransform) -> Result<Mask> {
    match transform {
        GeomTransform::Rotation(r) => rotate_mask(gt, r),
        GeomTransform::ZoomPatch(q) => zoom_patch_mask(gt, q),
    }
}

const CACHE_MAGIC: &[u8; 4] = b"MSNF";

/// Normalized encoder features keyed by sample and frame, held in memory or
/// under a directory named after the encoder fingerprint.
pub struct FeatureCache<'a> {
    extractor: &'a dyn FeatureExtractor,
    fingerprint: String,
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, FeatureMap>>,
}

impl<'a> FeatureCache<'a> {
    pub fn new(extractor: &'a dyn FeatureExtractor, dir: Option<PathBuf>) -> Result<Self> {
        let fingerprint = extractor.fingerprint();
        let dir = match dir {
            Some(d) => {
                let d = d.join(&fingerprint[..16.min(fingerprint.len())]);
                fs::create_dir_all(&d)?;
                Some(d)
            }
            None => None,
        };
        Ok(Self { extractor, fingerprint, dir, memory: Mutex::new(HashMap::new()) })
    }

    pub fn extractor(&self) -> &dyn FeatureExtractor {
        self.extractor
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Cached features for `key`, encoding `frame()` on a miss.
    pub fn features(&self, key: &str, frame: impl FnOnce() -> Result<Image>) -> Result<FeatureMap> {
        match &self.dir {
            None => {
                if let Some(f) = self.memory.lock().unwrap().get(key) {
                    return Ok(f.clone());
                }
                let f = self.extractor.extract(&frame()?)?.normalize();
                self.memory.lock().unwrap().insert(key.to_string(), f.clone());
                Ok(f)
            }
            Some(dir) => {
                let path = dir.join(format!("{key}.feat"));
                if path.exists() {
                    if let Ok(f) = read_features(&path) {
                        return Ok(f);
                    }
                    log::warn!("discarding unreadable feature cache entry {}", path.display());
                }
                let f = self.extractor.extract(&frame()?)?.normalize();
                write_features(&path, &f)?;
                Ok(f)
            }
        }
    }
}

fn write_features(path: &Path, f: &FeatureMap) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + 4 * f.data().len());
    bytes.extend_from_slice(CACHE_MAGIC);
    bytes.extend_from_slice(&(f.grid() as u32).to_le_bytes());
    bytes.extend_from_slice(&(f.dim() as u32).to_le_bytes());
    f.data().iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
    let tmp = path.with_extension("feat.tmp");
    fs::File::create(&tmp)?.write_all(&bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn read_features(path: &Path) -> Result<FeatureMap> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != CACHE_MAGIC {
        return Err(invalid_argument("not a feature cache file"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (grid, dim) = (word(4), word(8));
    let data: Vec<f32> = bytes[12..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    FeatureMap::new_normalized(grid, dim, data)
}

/// One training pair: a dataset record viewed through an augmented frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PairItem {
    pub record: usize,
    pub transform: GeomTransform,
}

/// Decoder inputs and targets for one pair.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub rows: SimilarityTensor,
    /// `None` for a self-pair, whose two sides coincide.
    pub cols: Option<SimilarityTensor>,
    pub base_gt: Mask,
    pub aug_gt: Mask,
    pub base_targets: Vec<f32>,
    pub aug_targets: Vec<f32>,
    pub transform: GeomTransform,
}

impl PreparedPair {
    pub fn from_features(base: &FeatureMap, aug: &FeatureMap, transform: GeomTransform, base_gt: Mask) -> Result<Self> {
        let s = similarity_matrix(base, aug, DEFAULT_SCALE)?;
        let rows = reshape_to_maps(&s, Side::Rows);
        let cols = if transform == GeomTransform::IDENTITY && base.data() == aug.data() {
            None
        } else {
            Some(reshape_to_maps(&s, Side::Cols))
        };
        let aug_gt = frame_mask(&base_gt, transform)?;
        let grid = base.grid();
        Ok(Self {
            rows,
            cols,
            base_targets: cell_targets(&base_gt, grid)?,
            aug_targets: cell_targets(&aug_gt, grid)?,
            base_gt,
            aug_gt,
            transform,
        })
    }

    pub fn grid(&self) -> usize {
        self.rows.grid()
    }

    fn sides(&self) -> Vec<(&SimilarityTensor, &[f32], &Mask)> {
        let mut out = vec![(&self.rows, &self.base_targets[..], &self.base_gt)];
        if let Some(cols) = &self.cols {
            out.push((cols, &self.aug_targets[..], &self.aug_gt));
        }
        out
    }
}

fn record_key(dataset: &Dataset, record: usize, transform: GeomTransform) -> String {
    let rec = &dataset.manifest.records[record];
    let stem = Path::new(&rec.file).file_stem().and_then(|s| s.to_str()).unwrap_or("record");
    format!("{:016x}_{stem}_{transform}", rec.seed)
}

/// Canonical image and mask of a manifest record.
pub fn load_canonical(dataset: &Dataset, record: usize) -> Result<(Image, Mask)> {
    let rec = dataset
        .manifest
        .records
        .get(record)
        .ok_or_else(|| invalid_argument(format!("record {record} is out of range")))?;
    let (img, mask) = dataset.load(rec)?;
    let canon = canonicalize(&img)?;
    let gt = if mask.size() == (FIDUCIAL_SIZE, FIDUCIAL_SIZE) {
        mask
    } else {
        resize_mask_nearest(&mask, FIDUCIAL_SIZE, FIDUCIAL_SIZE)?
    };
    Ok((canon.image, gt))
}

pub fn prepare_pair(dataset: &Dataset, cache: &FeatureCache, item: PairItem) -> Result<PreparedPair> {
    let (img, gt) = load_canonical(dataset, item.record)?;
    let base = cache.features(&record_key(dataset, item.record, GeomTransform::IDENTITY), || Ok(img.clone()))?;
    let aug = if item.transform == GeomTransform::IDENTITY {
        base.clone()
    } else {
        cache.features(&record_key(dataset, item.record, item.transform), || frame_image(&img, item.transform))?
    };
    PreparedPair::from_features(&base, &aug, item.transform, gt)
}

/// Fraction of each direction bin held out for validation, chosen by a
/// seeded shuffle within the bin. `true` marks a validation record.
pub fn validation_split(manifest: &Manifest, fraction: f64, seed: u64) -> Vec<bool> {
    let mut held_out = vec![false; manifest.records.len()];
    for theta in Rotation::ALL {
        let mut members: Vec<usize> = (0..manifest.records.len())
            .filter(|&i| direction_bin(manifest.records[i].rotation_angle) == theta)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(theta.quarter_turns() as u64 + 1);
        members.shuffle(&mut rng);
        let n = (fraction * members.len() as f64).round() as usize;
        members.iter().take(n).for_each(|&i| held_out[i] = true);
    }
    held_out
}

/// Owns the decoder being optimized and its optimizer state.
pub struct Trainer {
    pub decoder: CellDecoder<f32>,
    adam: Adam,
    config: TrainConfig,
}

impl Trainer {
    pub fn new(decoder: CellDecoder<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(config.beta1, config.beta2, config.weight_decay);
        Ok(Self { decoder, adam, config })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    /// One optimizer step on `batch`; returns the batch loss.
    pub fn step(&mut self, batch: &[PreparedPair], epoch: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
        if batch.is_empty() {
            return Err(invalid_argument("empty training batch"));
        }
        let lr = self.config.lr_at(epoch);
        self.decoder.net.zero_grad();
        let loss = match self.config.cells_per_sample {
            Some(k) => {
                let mut inputs = Vec::new();
                let mut targets = Vec::new();
                for pair in batch {
                    let sides = pair.sides();
                    let cells = pair.grid() * pair.grid();
                    let per_side = (k / sides.len()).clamp(1, cells);
                    for (tensor, side_targets, _) in sides {
                        let chosen = index::sample(rng, cells, per_side).into_vec();
                        inputs.extend(self.decoder.cell_inputs(tensor, &chosen)?);
                        targets.extend(chosen.iter().map(|&c| side_targets[c]));
                    }
                }
                let logits = self.decoder.forward_train(&inputs)?;
                let (loss, grad) = cell_loss_and_grad(&logits, &targets);
                self.decoder.backward(&grad);
                loss
            }
            None => {
                let side_count: usize = batch.iter().map(|p| p.sides().len()).sum();
                let weight = 1.0 / side_count as f32;
                let mut total = 0.0;
                for pair in batch {
                    let cells: Vec<usize> = (0..pair.grid() * pair.grid()).collect();
                    for (tensor, _, gt) in pair.sides() {
                        let inputs = self.decoder.cell_inputs(tensor, &cells)?;
                        let logits = self.decoder.forward_train(&inputs)?;
                        let (l, grad) = grid_loss_and_grad(&logits, pair.grid(), gt.data(), gt.height());
                        self.decoder.backward(&grad.iter().map(|g| g * weight).collect::<Vec<_>>());
                        total += l as f64 * weight as f64;
                    }
                }
                total
            }
        };
        let mut params = self.decoder.net.params_mut();
        self.adam.step(&mut params, lr);
        Ok(loss)
    }
}

/// Binary single-stream prediction for a pair, in the base frame.
pub fn pair_prediction(decoder: &CellDecoder<f32>, pair: &PreparedPair, post: &PostprocessConfig) -> Result<Mask> {
    let base_side = decoder.decode_grid(&pair.rows)?;
    let aug_side = match &pair.cols {
        Some(cols) => decoder.decode_grid_framed(cols, pair.transform)?,
        None => base_side.clone(),
    };
    let result = StreamResult { base_side, aug_side, transform: pair.transform };
    let [mut fused, other] = stream_candidates(&result, pair.base_gt.height())?;
    fused.max_with(&other)?;
    Ok(postprocess(&fused, post).0)
}

/// Mean pixel F1 of single-stream predictions over pairs with a non-empty
/// mask; `None` when no pair qualifies.
pub fn mean_pixel_f1(decoder: &CellDecoder<f32>, pairs: &[PreparedPair]) -> Result<Option<f64>> {
    let post = PostprocessConfig::default();
    let scores: Vec<Option<f64>> = pairs
        .par_iter()
        .map(|p| Ok(pixel_metrics(&pair_prediction(decoder, p, &post)?, &p.base_gt)?.map(|m| m.f1)))
        .collect::<Result<_>>()?;
    let valid: Vec<f64> = scores.into_iter().flatten().collect();
    Ok((!valid.is_empty()).then(|| valid.iter().sum::<f64>() / valid.len() as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_pixel_f1: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRunRecord {
    pub run: String,
    pub stream: String,
    pub direction: u32,
    pub decoder: String,
    pub epochs: Vec<EpochRecord>,
    pub config_hash: String,
    pub encoder_fingerprint: String,
    pub train_pairs: usize,
    pub validation_pairs: usize,
    pub checkpoint: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    run: String,
    stream: String,
    direction: u32,
    #[serde(flatten)]
    epoch: EpochRecord,
}

struct RunSpec<'p> {
    name: String,
    stream: &'static str,
    direction: Rotation,
    log_file: &'static str,
    train: Vec<PairItem>,
    validation: Vec<PairItem>,
    out_dir: &'p Path,
    checkpoint: PathBuf,
}

fn state_path(out_dir: &Path, name: &str) -> PathBuf {
    out_dir.join(format!("{name}.state.ckpt"))
}

fn save_state(path: &Path, trainer: &Trainer, record: &TrainRunRecord) -> Result<()> {
    let (first, second) = trainer.adam.moments();
    let mut ck = trainer.decoder.to_checkpoint(serde_json::json!({
        "record": record,
        "adam_step": trainer.adam.steps_taken(),
    }));
    for (k, (m, v)) in first.iter().zip(second).enumerate() {
        ck.push(format!("adam.m.{k}"), TensorData::F64(m.clone()));
        ck.push(format!("adam.v.{k}"), TensorData::F64(v.clone()));
    }
    ck.save(path)
}

fn load_state(path: &Path, config: &TrainConfig) -> Result<(Trainer, TrainRunRecord)> {
    let bad = |reason: &str| Error::Checkpoint { path: path.to_path_buf(), reason: reason.to_string() };
    let ck = Checkpoint::load(path)?;
    let decoder = CellDecoder::from_checkpoint(&ck)?;
    let run = ck.metadata.get("run").ok_or_else(|| bad("missing run state"))?;
    let record: TrainRunRecord =
        serde_json::from_value(run.get("record").cloned().ok_or_else(|| bad("missing run record"))?)?;
    let step = run.get("adam_step").and_then(|v| v.as_u64()).ok_or_else(|| bad("missing optimizer step"))?;
    let mut trainer = Trainer::new(decoder, config.clone())?;
    let count = ck.scoped("adam.m").len();
    if step > 0 {
        let fetch = |kind: &str, k: usize| {
            ck.get(&format!("adam.{kind}.{k}")).map(TensorData::to_f64).ok_or_else(|| bad("missing optimizer moment"))
        };
        let first = (0..count).map(|k| fetch("m", k)).collect::<Result<Vec<_>>>()?;
        let second = (0..count).map(|k| fetch("v", k)).collect::<Result<Vec<_>>>()?;
        trainer.adam.restore(step, first, second);
    }
    Ok((trainer, record))
}

fn rewrite_log(path: &Path, record: &TrainRunRecord) -> Result<()> {
    let mut lines: Vec<String> = match fs::read_to_string(path) {
        Ok(text) => text
            .lines()
            .filter(|l| serde_json::from_str::<LogLine>(l).map(|x| x.run != record.run).unwrap_or(false))
            .map(str::to_string)
            .collect(),
        Err(_) => Vec::new(),
    };
    for e in &record.epochs {
        let line = LogLine { run: record.run.clone(), stream: record.stream.clone(), direction: record.direction, epoch: e.clone() };
        lines.push(serde_json::to_string(&line)?);
    }
    let tmp = path.with_extension("jsonl.tmp");
    fs::write(&tmp, lines.join("\n") + "\n")?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn prepare_all(dataset: &Dataset, cache: &FeatureCache, items: &[PairItem]) -> Result<Vec<PreparedPair>> {
    items.par_iter().map(|&item| prepare_pair(dataset, cache, item)).collect()
}

fn run(
    spec: RunSpec,
    initial: Option<CellDecoder<f32>>,
    dataset: &Dataset,
    cache: &FeatureCache,
    config: &TrainConfig,
) -> Result<(CellDecoder<f32>, TrainRunRecord)> {
    config.validate()?;
    if spec.train.is_empty() {
        return Err(Error::Config(format!("no training pairs for run {}", spec.name)));
    }
    let fingerprint = cache.extractor().fingerprint();
    if fingerprint != cache.fingerprint() {
        return Err(Error::InvalidState("encoder changed since the feature cache was opened".into()));
    }
    fs::create_dir_all(spec.out_dir)?;
    let state = state_path(spec.out_dir, &spec.name);
    let config_hash = config.hash();
    let resumed = if state.exists() {
        let (trainer, record) = load_state(&state, config)?;
        if record.config_hash == config_hash
            && record.encoder_fingerprint == fingerprint
            && record.train_pairs == spec.train.len()
        {
            log::info!("{}: resuming after epoch {}", spec.name, record.epochs.len());
            Some((trainer, record))
        } else {
            log::warn!("{}: ignoring stale state {}", spec.name, state.display());
            None
        }
    } else {
        None
    };
    let (mut trainer, mut record) = match resumed {
        Some(r) => r,
        None => {
            let decoder = match initial {
                Some(d) => d,
                None => {
                    let grid = prepare_pair(dataset, cache, spec.train[0])?.grid();
                    CellDecoder::new(config.decoder.clone(), grid, spec.direction, config.seed)?
                }
            };
            let record = TrainRunRecord {
                run: spec.name.clone(),
                stream: spec.stream.to_string(),
                direction: spec.direction.degrees(),
                decoder: decoder.kind().label().to_string(),
                epochs: Vec::new(),
                config_hash: config_hash.clone(),
                encoder_fingerprint: fingerprint.clone(),
                train_pairs: spec.train.len(),
                validation_pairs: spec.validation.len(),
                checkpoint: spec.checkpoint.clone(),
            };
            (Trainer::new(decoder, config.clone())?, record)
        }
    };
    let validation = if spec.validation.is_empty() || record.epochs.len() >= config.epochs {
        Vec::new()
    } else {
        prepare_all(dataset, cache, &spec.validation)?
    };
    for epoch in record.epochs.len()..config.epochs {
        let start = Instant::now();
        let mut order = spec.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1 + epoch as u64);
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for batch in order.chunks(config.batch_size) {
            let prepared = prepare_all(dataset, cache, batch)?;
            losses.push(trainer.step(&prepared, epoch, &mut rng)?);
        }
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let val_pixel_f1 = if validation.is_empty() { None } else { mean_pixel_f1(&trainer.decoder, &validation)? };
        let entry = EpochRecord {
            epoch,
            lr: config.lr_at(epoch),
            loss,
            val_pixel_f1,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        log::info!("{} epoch {epoch}: loss {loss:.5} val F1 {val_pixel_f1:?}", spec.name);
        record.epochs.push(entry);
        save_state(&state, &trainer, &record)?;
        rewrite_log(&spec.out_dir.join(spec.log_file), &record)?;
    }
    if cache.extractor().fingerprint() != fingerprint {
        return Err(Error::InvalidState("encoder weights changed during training".into()));
    }
    let mut decoder = trainer.decoder;
    if spec.stream == "scale" {
        decoder.bump_version();
    }
    decoder.save(&spec.checkpoint, serde_json::to_value(&record)?)?;
    Ok((decoder, record))
}

fn split_bin(dataset: &Dataset, theta: Rotation, config: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let held_out = validation_split(&dataset.manifest, config.validation_fraction, config.seed);
    let in_bin = |i: &usize| direction_bin(dataset.manifest.records[*i].rotation_angle) == theta;
    let all = 0..dataset.manifest.records.len();
    let train = all.clone().filter(in_bin).filter(|&i| !held_out[i]).collect();
    let val = all.filter(in_bin).filter(|&i| held_out[i]).collect();
    (train, val)
}

fn cap<T>(mut v: Vec<T>, limit: Option<usize>) -> Vec<T> {
    if let Some(n) = limit {
        v.truncate(n);
    }
    v
}

/// Trains a fresh decoder for direction `theta` on the records of its bin,
/// each paired with its own `theta` rotation. Writes
/// `out_dir/theta_<deg>.ckpt` and appends to `out_dir/train_log.jsonl`.
pub fn train_direction(
    theta: Rotation,
    dataset: &Dataset,
    cache: &FeatureCache,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<(CellDecoder<f32>, TrainRunRecord)> {
    let (train, val) = split_bin(dataset, theta, config);
    if train.is_empty() {
        return Err(Error::Config(format!("no training records in the {theta} direction bin")));
    }
    let item = |record| PairItem { record, transform: GeomTransform::Rotation(theta) };
    let spec = RunSpec {
        name: format!("theta_{}", theta.degrees()),
        stream: "rotation",
        direction: theta,
        log_file: TRAIN_LOG,
        train: cap(train.into_iter().map(item).collect(), config.max_samples),
        validation: cap(val.into_iter().map(item).collect(), config.validation_limit),
        out_dir,
        checkpoint: out_dir.join(ModelSet::checkpoint_name(theta)),
    };
    run(spec, None, dataset, cache, config)
}

/// Zoom-patch pairs for the upright bin's records, four per record.
pub fn scale_items(records: &[usize]) -> Vec<PairItem> {
    records
        .iter()
        .flat_map(|&record| Quadrant::ALL.iter().map(move |&q| PairItem { record, transform: GeomTransform::ZoomPatch(q) }))
        .collect()
}

/// Continues the upright decoder on zoom-patch pairs and overwrites
/// `out_dir/theta_0.ckpt` with the next version.
pub fn train_scale_stream(
    decoder: CellDecoder<f32>,
    dataset: &Dataset,
    cache: &FeatureCache,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<(CellDecoder<f32>, TrainRunRecord)> {
    if decoder.direction() != Rotation::R0 {
        return Err(invalid_argument("the scale stream continues the upright decoder"));
    }
    let (train, val) = split_bin(dataset, Rotation::R0, config);
    if train.is_empty() {
        return Err(Error::Config("no training records in the rot0 direction bin".into()));
    }
    let spec = RunSpec {
        name: "theta_0_scale".into(),
        stream: "scale",
        direction: Rotation::R0,
        log_file: SCALE_LOG,
        train: cap(scale_items(&train), config.max_samples),
        validation: cap(scale_items(&val), config.validation_limit),
        out_dir,
        checkpoint: out_dir.join(ModelSet::checkpoint_name(Rotation::R0)),
    };
    run(spec, Some(decoder), dataset, cache, config)
}

/// Largest relative difference between back-propagated parameter gradients
/// of the upsampled-grid loss and central finite differences with step `h`.
/// Parameters whose gradients are both below `1e-7` in magnitude are skipped.
pub fn gradient_check(decoder: &mut CellDecoder<f64>, inputs: &[f64], gt: &[f64], size: usize, h: f64) -> Result<f64> {
    let grid = decoder.grid();
    if inputs.len() != grid * grid * decoder.input_len() || gt.len() != size * size {
        return Err(invalid_argument("gradient check needs one input per grid cell and a size x size mask"));
    }
    let eval = |d: &mut CellDecoder<f64>| -> Result<f64> {
        let logits = d.forward_train(inputs)?;
        Ok(grid_loss_and_grad(&logits, grid, gt, size).0)
    };
    decoder.net.zero_grad();
    let logits = decoder.forward_train(inputs)?;
    let (_, g) = grid_loss_and_grad(&logits, grid, gt, size);
    decoder.backward(&g);
    let analytic: Vec<Vec<f64>> = decoder.net.params_mut().iter().map(|p| p.grad.clone()).collect();
    let mut worst = 0.0f64;
    for (pi, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let original = decoder.net.params_mut()[pi].value[k];
            decoder.net.params_mut()[pi].value[k] = original + h;
            let up = eval(decoder)?;
            decoder.net.params_mut()[pi].value[k] = original - h;
            let down = eval(decoder)?;
            decoder.net.params_mut()[pi].value[k] = original;
            let numeric = (up - down) / (2.0 * h);
            let scale = a.abs().max(numeric.abs());
            if scale > 1e-7 {
                worst = worst.max((a - numeric).abs() / scale);
            }
        }
    }
    Ok(worst)
}
