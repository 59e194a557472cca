//! Per-cell decoders turning a similarity tensor into a tamper-probability
//! grid.
//!
//! Two input encodings share one trainable stack and one checkpoint format:
//!
//! * [`DecoderKind::SimilarityMaps`]: the 9-channel neighbourhood stack of 2-D
//!   similarity maps fed to a convolutional classifier (conv/bn/relu blocks
//!   separated by max pooling, then global average pooling and a linear unit).
//! * [`DecoderKind::SortedPercentiles`]: the ablation baseline, which sorts a
//!   cell's similarities, samples fixed rank percentiles and feeds them to a
//!   small per-cell perceptron. Spatial layout is discarded.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TensorData};
use crate::error::{invalid_argument, Error, Result};
use crate::imaging::{GeomTransform, Mask, Rotation};
use crate::nn::{sigmoid, Batch, BatchNorm, Conv3x3, Dense, GlobalAvgPool, Layer, MaxPool2, Real, Relu, Sequential};
use crate::similarity::SimilarityTensor;

pub const CHECKPOINT_KIND: &str = "msn_cell_decoder";
/// Cells classified per inference batch.
const INFER_CHUNK: usize = 128;

/// Convolution widths grouped into stages; a 2x2 max pool separates stages.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub stages: Vec<Vec<usize>>,
}

impl ClassifierArch {
    /// Eight 3x3 convolutions, three poolings: 32-32 | 64-64 | 128-128 | 256-256.
    pub fn full() -> Self {
        Self { stages: vec![vec![32, 32], vec![64, 64], vec![128, 128], vec![256, 256]] }
    }

    /// Same topology at a quarter of the width, sized for single-core training.
    pub fn compact() -> Self {
        Self { stages: vec![vec![8, 8], vec![16, 16], vec![32, 32], vec![64, 64]] }
    }

    pub fn conv_count(&self) -> usize {
        self.stages.iter().map(Vec::len).sum()
    }

    pub fn pool_count(&self) -> usize {
        self.stages.len().saturating_sub(1)
    }

    fn validate(&self) -> Result<()> {
        if self.stages.is_empty() || self.stages.iter().any(|s| s.is_empty() || s.contains(&0)) {
            return Err(invalid_argument("classifier stages must be non-empty with positive widths"));
        }
        Ok(())
    }
}

/// Rank percentiles sampled from a cell's descending-sorted similarities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PercentileSpec {
    /// Values in `[0, 100]`; percentile `p` picks rank `round(p / 100 * (n - 1))`.
    pub percentiles: Vec<f64>,
}

impl Default for PercentileSpec {
    /// 32 evenly spaced ranks over the top quarter of the sorted vector.
    fn default() -> Self {
        Self { percentiles: (0..32).map(|k| 25.0 * k as f64 / 31.0).collect() }
    }
}

impl PercentileSpec {
    pub fn ranks(&self, n: usize) -> Vec<usize> {
        self.percentiles
            .iter()
            .map(|p| ((p / 100.0) * (n - 1) as f64).round().clamp(0.0, (n - 1) as f64) as usize)
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.percentiles.is_empty() {
            return Err(invalid_argument("percentile spec is empty"));
        }
        if self.percentiles.iter().any(|p| !(0.0..=100.0).contains(p)) {
            return Err(invalid_argument("percentiles must lie in [0, 100]"));
        }
        Ok(())
    }
}

/// Sorted (descending) similarity values of one map, sampled at `ranks`.
pub fn percentile_features(map: &[f32], ranks: &[usize]) -> Vec<f32> {
    let mut sorted = map.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    ranks.iter().map(|&r| sorted[r]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    SimilarityMaps { arch: ClassifierArch },
    SortedPercentiles { spec: PercentileSpec, hidden: usize },
}

impl DecoderKind {
    pub fn label(&self) -> &'static str {
        match self {
            DecoderKind::SimilarityMaps { .. } => "2d-similarity-maps",
            DecoderKind::SortedPercentiles { .. } => "1d-sorted-percentiles",
        }
    }
}

/// A grid of per-cell tamper probabilities in one image frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityGrid {
    pub grid: usize,
    pub values: Vec<f32>,
    pub frame: GeomTransform,
}

impl ProbabilityGrid {
    pub fn new(grid: usize, values: Vec<f32>, frame: GeomTransform) -> Result<Self> {
        if values.len() != grid * grid {
            return Err(invalid_argument("probability grid size mismatch"));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid_argument("probabilities must lie in [0, 1]"));
        }
        Ok(Self { grid, values, frame })
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.grid + j]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }
}

/// Interpolation taps mapping `size` pixels onto `grid` cell centres.
/// Cell `i` covers pixels `[i * s, (i + 1) * s)` with `s = size / grid`.
pub(crate) fn cell_taps(grid: usize, size: usize) -> Vec<(usize, usize, f32)> {
    (0..size)
        .map(|p| {
            let x = ((p as f64 + 0.5) * grid as f64 / size as f64 - 0.5).clamp(0.0, (grid - 1) as f64);
            let x0 = (x.floor() as usize).min(grid - 1);
            let x1 = (x0 + 1).min(grid - 1);
            (x0, x1, (x - x0 as f64) as f32)
        })
        .collect()
}

/// Bilinear upsampling of a probability grid to a `size x size` mask,
/// sampling at cell centres.
pub fn upsample_to_mask(grid: &ProbabilityGrid, size: usize) -> Result<Mask> {
    if size == 0 {
        return Err(invalid_argument("mask size must be positive"));
    }
    Mask::new(size, size, upsample_values(&grid.values, grid.grid, size))
}

pub(crate) fn upsample_values<T: Real>(values: &[T], grid: usize, size: usize) -> Vec<T> {
    let taps = cell_taps(grid, size);
    let mut out = Vec::with_capacity(size * size);
    for &(r0, r1, fy) in &taps {
        let fy = T::lit(fy as f64);
        for &(c0, c1, fx) in &taps {
            let fx = T::lit(fx as f64);
            let at = |r: usize, c: usize| values[r * grid + c];
            let top = at(r0, c0) + (at(r0, c1) - at(r0, c0)) * fx;
            let bottom = at(r1, c0) + (at(r1, c1) - at(r1, c0)) * fx;
            out.push(top + (bottom - top) * fy);
        }
    }
    out
}

/// Adjoint of [`upsample_values`]: scatters pixel gradients onto the grid.
pub(crate) fn upsample_adjoint<T: Real>(pixel_grad: &[T], grid: usize, size: usize) -> Vec<T> {
    let taps = cell_taps(grid, size);
    let mut out = vec![T::zero(); grid * grid];
    for (r, &(r0, r1, fy)) in taps.iter().enumerate() {
        let fy = T::lit(fy as f64);
        for (c, &(c0, c1, fx)) in taps.iter().enumerate() {
            let fx = T::lit(fx as f64);
            let g = pixel_grad[r * size + c];
            let top = g * (T::one() - fy);
            let bottom = g * fy;
            out[r0 * grid + c0] += top * (T::one() - fx);
            out[r0 * grid + c1] += top * fx;
            out[r1 * grid + c0] += bottom * (T::one() - fx);
            out[r1 * grid + c1] += bottom * fx;
        }
    }
    out
}

/// A trainable per-cell decoder bound to one direction.
#[derive(Clone, Debug)]
pub struct CellDecoder<T = f32> {
    kind: DecoderKind,
    grid: usize,
    direction: Rotation,
    version: u32,
    pub net: Sequential<T>,
}

fn build_net<T: Real>(kind: &DecoderKind, grid: usize, seed: u64) -> Result<Sequential<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    match kind {
        DecoderKind::SimilarityMaps { arch } => {
            arch.validate()?;
            if grid >> arch.pool_count() == 0 {
                return Err(invalid_argument(format!("grid {grid} too small for {} poolings", arch.pool_count())));
            }
            let mut cin = 9;
            for (s, stage) in arch.stages.iter().enumerate() {
                if s > 0 {
                    layers.push(Layer::Pool(MaxPool2::default()));
                }
                for &w in stage {
                    layers.push(Layer::Conv(Conv3x3::new(cin, w, false, &mut rng)));
                    layers.push(Layer::Norm(BatchNorm::new(w)));
                    layers.push(Layer::Relu(Relu::default()));
                    cin = w;
                }
            }
            layers.push(Layer::GlobalAvg(GlobalAvgPool::default()));
            layers.push(Layer::Dense(Dense::new(cin, 1, &mut rng)));
        }
        DecoderKind::SortedPercentiles { spec, hidden } => {
            spec.validate()?;
            if *hidden == 0 {
                return Err(invalid_argument("hidden width must be positive"));
            }
            layers.push(Layer::Dense(Dense::new(spec.percentiles.len(), *hidden, &mut rng)));
            layers.push(Layer::Relu(Relu::default()));
            layers.push(Layer::Dense(Dense::new(*hidden, 1, &mut rng)));
        }
    }
    Ok(Sequential::new(layers))
}

impl<T: Real> CellDecoder<T> {
    pub fn new(kind: DecoderKind, grid: usize, direction: Rotation, seed: u64) -> Result<Self> {
        let net = build_net(&kind, grid, seed)?;
        Ok(Self { kind, grid, direction, version: 0, net })
    }

    pub fn kind(&self) -> &DecoderKind {
        &self.kind
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn direction(&self) -> Rotation {
        self.direction
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    /// Values per cell input: `9 G^2` for maps, the percentile count otherwise.
    pub fn input_len(&self) -> usize {
        match &self.kind {
            DecoderKind::SimilarityMaps { .. } => 9 * self.grid * self.grid,
            DecoderKind::SortedPercentiles { spec, .. } => spec.percentiles.len(),
        }
    }

    /// Wraps `n` consecutive per-cell inputs into a network batch.
    pub fn batch_from_inputs(&self, inputs: &[T]) -> Result<Batch<T>> {
        let len = self.input_len();
        if inputs.is_empty() || inputs.len() % len != 0 {
            return Err(invalid_argument(format!("cell inputs must be a multiple of {len} values")));
        }
        let n = inputs.len() / len;
        Ok(match &self.kind {
            DecoderKind::SimilarityMaps { .. } => Batch::from_nchw(n, 9, self.grid, self.grid, inputs),
            DecoderKind::SortedPercentiles { .. } => Batch::from_nchw(n, len, 1, 1, inputs),
        })
    }

    /// Per-cell inputs for `cells` (flat indices `j + i * G`) of `s`.
    pub fn cell_inputs(&self, s: &SimilarityTensor, cells: &[usize]) -> Result<Vec<T>> {
        if s.grid() != self.grid {
            return Err(invalid_argument(format!(
                "similarity grid {} does not match decoder grid {}",
                s.grid(),
                self.grid
            )));
        }
        let g = self.grid;
        let len = self.input_len();
        let mut out = vec![T::zero(); cells.len() * len];
        match &self.kind {
            DecoderKind::SimilarityMaps { .. } => {
                let mut buf = vec![0.0f32; len];
                for (k, &cell) in cells.iter().enumerate() {
                    s.write_stack(cell / g, cell % g, &mut buf)?;
                    for (o, &v) in out[k * len..(k + 1) * len].iter_mut().zip(&buf) {
                        *o = T::lit(v as f64);
                    }
                }
            }
            DecoderKind::SortedPercentiles { spec, .. } => {
                let ranks = spec.ranks(g * g);
                for (k, &cell) in cells.iter().enumerate() {
                    let feats = percentile_features(s.map(cell / g, cell % g), &ranks);
                    for (o, v) in out[k * len..(k + 1) * len].iter_mut().zip(feats) {
                        *o = T::lit(v as f64);
                    }
                }
            }
        }
        Ok(out)
    }

    /// Inference-mode logits for a batch of cell inputs.
    pub fn logits(&self, inputs: &[T]) -> Result<Vec<T>> {
        Ok(self.net.infer(self.batch_from_inputs(inputs)?).data)
    }

    pub fn classify_cell(&self, input: &[T]) -> Result<T> {
        if input.len() != self.input_len() {
            return Err(invalid_argument(format!(
                "cell input has {} values, decoder expects {}",
                input.len(),
                self.input_len()
            )));
        }
        Ok(sigmoid(self.logits(input)?[0]))
    }

    /// Training-mode forward pass; returns logits and caches activations.
    pub fn forward_train(&mut self, inputs: &[T]) -> Result<Vec<T>> {
        let batch = self.batch_from_inputs(inputs)?;
        Ok(self.net.forward(batch).data)
    }

    /// Back-propagates logit gradients, accumulating parameter gradients.
    pub fn backward(&mut self, grad_logits: &[T]) {
        let n = grad_logits.len();
        self.net.backward(Batch { channels: 1, count: n, height: 1, width: 1, data: grad_logits.to_vec() });
    }

    pub fn net_mut(&mut self) -> &mut Sequential<T> {
        &mut self.net
    }
}

impl CellDecoder<f32> {
    /// Classifies every cell of `s`, in batches.
    pub fn decode_grid(&self, s: &SimilarityTensor) -> Result<ProbabilityGrid> {
        self.decode_grid_framed(s, GeomTransform::IDENTITY)
    }

    pub fn decode_grid_framed(&self, s: &SimilarityTensor, frame: GeomTransform) -> Result<ProbabilityGrid> {
        let n = self.grid * self.grid;
        let mut values = Vec::with_capacity(n);
        let cells: Vec<usize> = (0..n).collect();
        for chunk in cells.chunks(INFER_CHUNK) {
            let inputs = self.cell_inputs(s, chunk)?;
            values.extend(self.logits(&inputs)?.into_iter().map(sigmoid));
        }
        ProbabilityGrid::new(self.grid, values, frame)
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::json!({
                "decoder": self.kind,
                "grid": self.grid,
                "direction": self.direction,
                "version": self.version,
                "param_count": self.param_count(),
                "run": extra,
            }),
        );
        for (name, values) in self.net.state() {
            ck.push(format!("net.{name}"), TensorData::F32(values));
        }
        ck
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<()> {
        self.to_checkpoint(extra).save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = |reason: String| Error::Config(format!("decoder checkpoint: {reason}"));
        if ck.kind != CHECKPOINT_KIND {
            return Err(bad(format!("unexpected kind {}", ck.kind)));
        }
        let meta = &ck.metadata;
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| bad(format!("missing field {k}")));
        let kind: DecoderKind = serde_json::from_value(field("decoder")?)?;
        let grid: usize = serde_json::from_value(field("grid")?)?;
        let direction: Rotation = serde_json::from_value(field("direction")?)?;
        let version: u32 = serde_json::from_value(field("version")?)?;
        let mut dec = Self::new(kind, grid, direction, 0)?;
        dec.version = version;
        let tensors = ck.scoped("net");
        dec.net.load_state(|name| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t.to_f32()))?;
        Ok(dec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// The 1-D ablation decoder applied to a whole tensor.
pub fn baseline_decode_1d(model: &CellDecoder<f32>, s: &SimilarityTensor) -> Result<ProbabilityGrid> {
    if !matches!(model.kind(), DecoderKind::SortedPercentiles { .. }) {
        return Err(invalid_argument("baseline decoding needs a sorted-percentile decoder"));
    }
    model.decode_grid(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::Side;
    use rand::Rng;

    fn tiny_maps(grid: usize) -> CellDecoder<f32> {
        let arch = ClassifierArch { stages: vec![vec![4], vec![4]] };
        CellDecoder::new(DecoderKind::SimilarityMaps { arch }, grid, Rotation::R0, 5).unwrap()
    }

    fn random_tensor(grid: usize, seed: u64) -> SimilarityTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid * grid;
        SimilarityTensor::from_maps(grid, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect(), Side::Rows).unwrap()
    }

    #[test]
    fn architectures_have_stated_layer_counts() {
        for arch in [ClassifierArch::full(), ClassifierArch::compact()] {
            assert_eq!(arch.conv_count(), 8);
            assert_eq!(arch.pool_count(), 3);
        }
    }

    #[test]
    fn classify_cell_range_determinism_and_shape() {
        let dec = tiny_maps(8);
        let s = random_tensor(8, 1);
        let input = dec.cell_inputs(&s, &[10]).unwrap();
        let p = dec.classify_cell(&input).unwrap();
        assert!((0.0..=1.0).contains(&p));
        assert_eq!(p, dec.classify_cell(&input).unwrap());
        assert!(matches!(dec.classify_cell(&input[1..]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn decode_grid_matches_looped_cells() {
        let dec = tiny_maps(8);
        let s = random_tensor(8, 2);
        let grid = dec.decode_grid(&s).unwrap();
        assert_eq!(grid.values.len(), 64);
        for cell in 0..64 {
            let p = dec.classify_cell(&dec.cell_inputs(&s, &[cell]).unwrap()).unwrap();
            assert!((p - grid.values[cell]).abs() < 1e-6);
        }
        assert!(dec.decode_grid(&random_tensor(4, 0)).is_err());
    }

    #[test]
    fn zero_tensor_decodes_uniformly() {
        let dec = tiny_maps(8);
        let grid = dec.decode_grid(&SimilarityTensor::zeros(8)).unwrap();
        // Border cells see zero-padded neighbours too, which equal the zero maps.
        assert!(grid.values.iter().all(|&v| v == grid.values[0]));
    }

    #[test]
    fn upsample_cases() {
        let ones = ProbabilityGrid::new(32, vec![1.0; 1024], GeomTransform::IDENTITY).unwrap();
        let m = upsample_to_mask(&ones, 256).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
        let vals: Vec<f32> = (0..1024).map(|v| (v % 7) as f32 / 7.0).collect();
        let g = ProbabilityGrid::new(32, vals.clone(), GeomTransform::IDENTITY).unwrap();
        assert_eq!(upsample_to_mask(&g, 32).unwrap().data(), &vals[..]);
        assert!(upsample_to_mask(&g, 0).is_err());
    }

    #[test]
    fn hot_cell_bump_peaks_inside_its_footprint() {
        for &(hi, hj) in &[(0usize, 0usize), (5, 17), (31, 31), (16, 3)] {
            let mut vals = vec![0.0; 1024];
            vals[hi * 32 + hj] = 1.0;
            let m = upsample_to_mask(&ProbabilityGrid::new(32, vals, GeomTransform::IDENTITY).unwrap(), 256).unwrap();
            let (arg, _) = m.data().iter().enumerate().fold((0, -1.0f32), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
            let (r, c) = (arg / 256, arg % 256);
            assert!(r / 8 == hi && c / 8 == hj, "argmax ({r},{c}) outside cell ({hi},{hj})");
        }
    }

    #[test]
    fn upsample_adjoint_is_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..24 * 24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ax = upsample_values(&x, 4, 24);
        let aty = upsample_adjoint(&y, 4, 24);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn percentile_features_cases() {
        let spec = PercentileSpec::default();
        let mut map = vec![0.0f32; 1024];
        map[37] = 1.0;
        let ranks = spec.ranks(1024);
        let f = percentile_features(&map, &ranks);
        assert_eq!(f[0], 1.0);
        assert!(f[1..].iter().all(|&v| v == 0.0));
        let constant = percentile_features(&[0.3; 1024], &ranks);
        assert!(constant.iter().all(|&v| v == 0.3));
        let bad = PercentileSpec { percentiles: vec![] };
        assert!(CellDecoder::<f32>::new(DecoderKind::SortedPercentiles { spec: bad, hidden: 4 }, 32, Rotation::R0, 0).is_err());
    }

    #[test]
    fn baseline_ignores_permutations_within_a_map() {
        let spec = PercentileSpec::default();
        let ranks = spec.ranks(64);
        let s = random_tensor(8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut map = s.map(3, 3).to_vec();
        let before = percentile_features(&map, &ranks);
        for i in (1..map.len()).rev() {
            map.swap(i, rng.gen_range(0..=i));
        }
        assert_eq!(percentile_features(&map, &ranks), before);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        let mut dec = tiny_maps(8);
        dec.bump_version();
        dec.save(&path, serde_json::json!({"note": "t"})).unwrap();
        let back = CellDecoder::load(&path).unwrap();
        assert_eq!(back.param_count(), dec.param_count());
        assert_eq!(back.version(), 1);
        let s = random_tensor(8, 3);
        assert_eq!(back.decode_grid(&s).unwrap().values, dec.decode_grid(&s).unwrap().values);
    }
}
