//! Frozen convolutional feature extractor.
//!
//! The backbone is the batch-normalized 16-layer VGG feature stack cut after
//! its 26th entry. Counting the entries of the stack as `conv, bn, relu` per
//! convolution plus one entry per max-pool, indices 0..=25 are
//!
//! ```text
//!  0 conv 3->64    1 bn   2 relu   3 conv 64->64    4 bn   5 relu   6 pool
//!  7 conv 64->128  8 bn   9 relu  10 conv 128->128 11 bn  12 relu  13 pool
//! 14 conv 128->256 15 bn 16 relu  17 conv 256->256 18 bn  19 relu
//! 20 conv 256->256 21 bn 22 relu  23 pool
//! 24 conv 256->512 25 bn
//! ```
//!
//! so a 256x256 input yields a 32x32x512 grid (three 2x poolings).

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::{invalid_argument, invalid_input, Error, Result};
use crate::imaging::{Image, FIDUCIAL_SIZE};
use crate::nn::{Batch, BatchNorm, Conv3x3, Layer, MaxPool2, Relu, Sequential};

pub const GRID: usize = FIDUCIAL_SIZE / 8;
pub const FEATURE_DIM: usize = 512;

/// Cells whose norm falls below this stay zero under normalization.
pub const ZERO_NORM: f32 = 1e-12;

/// A `G x G` grid of `D`-dimensional descriptors, stored cell-major
/// (cell `(i, j)` occupies `data[(i * G + j) * D..][..D]`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    grid: usize,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl FeatureMap {
    pub fn new(grid: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if grid == 0 || dim == 0 {
            return Err(invalid_input("feature grid and depth must be positive"));
        }
        if data.len() != grid * grid * dim {
            return Err(invalid_input(format!(
                "expected {} feature values for a {grid}x{grid}x{dim} map, got {}",
                grid * grid * dim,
                data.len()
            )));
        }
        Ok(Self { grid, dim, data, normalized: false })
    }

    /// Wraps data that is already L2-normalized per cell (unit or zero norm
    /// within `1e-3`), for example features reloaded from a cache.
    pub fn new_normalized(grid: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        let mut map = Self::new(grid, dim, data)?;
        for cell in map.data.chunks(dim) {
            let norm = cell.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm > 1e-6 && (norm - 1.0).abs() > 1e-3 {
                return Err(invalid_input(format!("feature cell has norm {norm}, expected unit length")));
            }
        }
        map.normalized = true;
        Ok(map)
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn cell(&self, i: usize, j: usize) -> &[f32] {
        let start = (i * self.grid + j) * self.dim;
        &self.data[start..start + self.dim]
    }

    /// Per-cell L2 normalization along the descriptor axis.
    pub fn normalize(&self) -> FeatureMap {
        let mut data = self.data.clone();
        for cell in data.chunks_mut(self.dim) {
            let norm = cell.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm < ZERO_NORM as f64 {
                cell.iter_mut().for_each(|v| *v = 0.0);
            } else {
                cell.iter_mut().for_each(|v| *v = (*v as f64 / norm) as f32);
            }
        }
        FeatureMap { grid: self.grid, dim: self.dim, data, normalized: true }
    }
}

/// Per-channel input standardization applied before the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Preprocess {
    /// The ImageNet statistics bundled with torchvision's pretrained weights.
    fn default() -> Self {
        Self { mean: [0.485, 0.456, 0.406], std: [0.229, 0.224, 0.225] }
    }
}

/// Where the backbone weights come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneSource {
    Checkpoint(PathBuf),
    /// Same shape contract, seeded Kaiming initialization. For environments
    /// without pretrained weights.
    RandomInit { seed: u64 },
}

/// Anything that maps a fiducial image to a feature grid.
pub trait FeatureExtractor: Sync {
    fn extract(&self, img: &Image) -> Result<FeatureMap>;

    fn extract_batch(&self, imgs: &[Image]) -> Result<Vec<FeatureMap>> {
        imgs.iter().map(|img| self.extract(img)).collect()
    }

    /// Digest of every weight; unchanged across training.
    fn fingerprint(&self) -> String;
}

const CONV_PLAN: [(usize, usize); 8] =
    [(3, 64), (64, 64), (64, 128), (128, 128), (128, 256), (256, 256), (256, 256), (256, 512)];
const POOL_AFTER: [usize; 3] = [1, 3, 6];

pub const CHECKPOINT_KIND: &str = "vgg16_bn_features_26";

/// The frozen backbone. Immutable after construction.
#[derive(Clone, Debug)]
pub struct Encoder {
    net: Sequential<f32>,
    preprocess: Preprocess,
    source: BackboneSource,
}

fn build_layers(mut conv: impl FnMut(usize, usize, usize) -> Conv3x3<f32>) -> Vec<Layer<f32>> {
    let mut layers = Vec::new();
    for (k, &(cin, cout)) in CONV_PLAN.iter().enumerate() {
        layers.push(Layer::Conv(conv(k, cin, cout)));
        layers.push(Layer::Norm(BatchNorm::new(cout)));
        if k + 1 < CONV_PLAN.len() {
            layers.push(Layer::Relu(Relu::default()));
        }
        if POOL_AFTER.contains(&k) {
            layers.push(Layer::Pool(MaxPool2::default()));
        }
    }
    debug_assert_eq!(layers.len(), 26);
    layers
}

impl Encoder {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = build_layers(|_, cin, cout| {
            // Kaiming normal, fan-out mode, zero bias: torchvision's VGG init.
            let normal = Normal::new(0.0, (2.0 / (cout * 9) as f64).sqrt()).unwrap();
            let weight = (0..cout * cin * 9).map(|_| normal.sample(&mut rng) as f32).collect();
            Conv3x3::from_weights(cin, cout, weight, Some(vec![0.0; cout])).unwrap()
        });
        Self { net: Sequential::new(layers), preprocess: Preprocess::default(), source: BackboneSource::RandomInit { seed } }
    }

    /// Loads weights named `features.{index}.{weight|bias|running_mean|running_var}`.
    pub fn from_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::Config(format!("encoder weights not found at {}", path.display())));
        }
        let ck = Checkpoint::load(path)?;
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                reason: format!("expected kind {CHECKPOINT_KIND}, found {}", ck.kind),
            });
        }
        let preprocess = match ck.metadata.get("preprocess") {
            Some(v) => serde_json::from_value(v.clone())?,
            None => Preprocess::default(),
        };
        let mut net = Sequential::new(build_layers(|_, cin, cout| {
            Conv3x3::from_weights(cin, cout, vec![0.0; cout * cin * 9], Some(vec![0.0; cout])).unwrap()
        }));
        let tensors = ck.scoped("features");
        net.load_state(|name| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t.to_f32()))
            .map_err(|e| Error::Checkpoint { path: path.to_path_buf(), reason: e.to_string() })?;
        Ok(Self { net, preprocess, source: BackboneSource::Checkpoint(path.to_path_buf()) })
    }

    pub fn from_source(source: &BackboneSource) -> Result<Self> {
        match source {
            BackboneSource::Checkpoint(p) => Self::from_checkpoint(p),
            BackboneSource::RandomInit { seed } => Ok(Self::random(*seed)),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ck = Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::json!({ "preprocess": self.preprocess, "source": self.source }),
        );
        for (name, values) in self.net.state() {
            ck.push(format!("features.{name}"), crate::checkpoint::TensorData::F32(values));
        }
        ck.save(path)
    }

    pub fn source(&self) -> &BackboneSource {
        &self.source
    }

    pub fn preprocess(&self) -> Preprocess {
        self.preprocess
    }

    pub fn is_pretrained(&self) -> bool {
        matches!(self.source, BackboneSource::Checkpoint(_))
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    fn to_input(&self, img: &Image) -> Batch<f32> {
        let (h, w) = img.size();
        let mut chw = vec![0.0f32; 3 * h * w];
        for (p, px) in img.data().chunks(3).enumerate() {
            for c in 0..3 {
                chw[c * h * w + p] = (px[c] - self.preprocess.mean[c]) / self.preprocess.std[c];
            }
        }
        Batch::from_nchw(1, 3, h, w, &chw)
    }
}

impl FeatureExtractor for Encoder {
    fn extract(&self, img: &Image) -> Result<FeatureMap> {
        if img.size() != (FIDUCIAL_SIZE, FIDUCIAL_SIZE) {
            return Err(invalid_input(format!(
                "encoder expects {FIDUCIAL_SIZE}x{FIDUCIAL_SIZE} input, got {}x{}",
                img.height(),
                img.width()
            )));
        }
        let out = self.net.infer(self.to_input(img));
        let (g, d) = (out.height, out.channels);
        if out.height != GRID || out.width != GRID || d != FEATURE_DIM {
            return Err(invalid_argument("backbone produced an unexpected feature shape"));
        }
        let plane = g * g;
        let mut data = vec![0.0f32; plane * d];
        for c in 0..d {
            for (p, &v) in out.data[c * plane..(c + 1) * plane].iter().enumerate() {
                data[p * d + c] = v;
            }
        }
        FeatureMap::new(g, d, data)
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, values) in self.net.state() {
            h.update(name.as_bytes());
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

pub fn normalize(f: &FeatureMap) -> FeatureMap {
    f.normalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn normalize_analytic_cases() {
        let mut data = vec![0.0f32; 2 * 2 * 3];
        data[0] = 3.0;
        data[1] = 4.0;
        let f = FeatureMap::new(2, 3, data).unwrap().normalize();
        assert!((f.cell(0, 0)[0] - 0.6).abs() < 1e-7);
        assert!((f.cell(0, 0)[1] - 0.8).abs() < 1e-7);
        assert_eq!(f.cell(0, 1), &[0.0, 0.0, 0.0]);
        assert!(f.is_normalized());
    }

    #[test]
    fn normalize_random_grid_has_unit_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..2 * 2 * 3).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let f = FeatureMap::new(2, 3, data).unwrap().normalize();
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0f64;
                for &v in f.cell(i, j) {
                    s += v as f64 * v as f64;
                }
                assert!((s.sqrt() - 1.0).abs() < 1e-6);
            }
        }
        let twice = f.normalize();
        for (a, b) in f.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_stack_has_26_entries() {
        let enc = Encoder::random(0);
        assert_eq!(enc.net.layers.len(), 26);
        assert!(matches!(enc.net.layers[25], Layer::Norm(_)));
    }

    #[test]
    fn missing_weights_is_config_error() {
        assert!(matches!(Encoder::from_checkpoint("/nonexistent/w.ckpt"), Err(Error::Config(_))));
    }

    #[test]
    fn wrong_input_size_rejected() {
        let enc = Encoder::random(0);
        assert!(matches!(enc.extract(&Image::filled(64, 64, [0.5; 3])), Err(Error::InvalidInput(_))));
    }
}
