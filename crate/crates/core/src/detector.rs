//! End-to-end inference: eight feature pairs, two-sided decoding per stream,
//! map-back to the base frame and per-pixel max fusion.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decoder::{upsample_to_mask, CellDecoder, ProbabilityGrid};
use crate::encoder::{FeatureExtractor, FeatureMap};
use crate::error::{invalid_argument, Error, Result};
use crate::imaging::{
    canonicalize, map_mask_back, resize_mask_nearest, rotate_quantized, zoom_patches, GeomTransform, Image, Mask,
    Rotation, FIDUCIAL_SIZE,
};
use crate::similarity::{reshape_to_maps, save_map_mosaic, similarity_matrix, Side, SimilarityTensor, DEFAULT_SCALE};

/// Which streams take part in detection.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamSelection {
    pub rotations: Vec<Rotation>,
    pub zoom: bool,
}

impl Default for StreamSelection {
    fn default() -> Self {
        Self::full()
    }
}

impl StreamSelection {
    pub fn full() -> Self {
        Self { rotations: Rotation::ALL.to_vec(), zoom: true }
    }

    pub fn rotations_only() -> Self {
        Self { rotations: Rotation::ALL.to_vec(), zoom: false }
    }

    pub fn upright_only() -> Self {
        Self { rotations: vec![Rotation::R0], zoom: false }
    }

    pub fn stream_count(&self) -> usize {
        self.rotations.len() + if self.zoom { 4 } else { 0 }
    }

    pub fn transforms(&self) -> Vec<GeomTransform> {
        let mut out: Vec<GeomTransform> = self.rotations.iter().map(|&r| GeomTransform::Rotation(r)).collect();
        if self.zoom {
            out.extend(crate::imaging::Quadrant::ALL.iter().map(|&q| GeomTransform::ZoomPatch(q)));
        }
        out
    }
}

/// Fusion thresholds, as fractions of the image area where relevant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub threshold: f32,
    pub min_component_fraction: f64,
    pub verdict_fraction: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self { threshold: 0.5, min_component_fraction: 0.001, verdict_fraction: 0.002 }
    }
}

/// One decoder per direction; the upright decoder also serves zoom patches.
#[derive(Clone, Debug, Default)]
pub struct ModelSet {
    pub decoders: BTreeMap<Rotation, CellDecoder<f32>>,
}

impl ModelSet {
    pub fn checkpoint_name(direction: Rotation) -> String {
        format!("theta_{}.ckpt", direction.degrees())
    }

    pub fn insert(&mut self, decoder: CellDecoder<f32>) {
        self.decoders.insert(decoder.direction(), decoder);
    }

    pub fn get(&self, direction: Rotation) -> Result<&CellDecoder<f32>> {
        self.decoders
            .get(&direction)
            .ok_or_else(|| Error::Config(format!("no decoder for direction {direction}")))
    }

    /// Loads `theta_{0,90,180,270}.ckpt` files present in `dir`.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut set = Self::default();
        for r in Rotation::ALL {
            let path = dir.join(Self::checkpoint_name(r));
            if path.exists() {
                let dec = CellDecoder::load(&path)?;
                if dec.direction() != r {
                    return Err(Error::Checkpoint { path, reason: format!("holds direction {}", dec.direction()) });
                }
                set.insert(dec);
            }
        }
        if set.decoders.is_empty() {
            return Err(Error::Config(format!("no decoder checkpoints in {}", dir.display())));
        }
        Ok(set)
    }

    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        self.decoders
            .values()
            .map(|d| {
                let path = dir.join(Self::checkpoint_name(d.direction()));
                d.save(&path, serde_json::Value::Null)?;
                Ok(path)
            })
            .collect()
    }
}

/// `<F_base, F_aug>` with the transform producing the augmented frame.
#[derive(Clone, Debug)]
pub struct FeaturePair {
    pub base: FeatureMap,
    pub aug: FeatureMap,
    pub transform: GeomTransform,
}

/// The image of frame `transform` for a fiducial base image.
pub fn frame_image(base: &Image, transform: GeomTransform) -> Result<Image> {
    match transform {
        GeomTransform::Rotation(r) => rotate_quantized(base, r),
        GeomTransform::ZoomPatch(q) => {
            Ok(zoom_patches(base)?.swap_remove(q.index() - 1).0)
        }
    }
}

/// Encodes the base frame and every selected augmented frame.
pub fn build_pairs_with(
    base: &Image,
    extractor: &dyn FeatureExtractor,
    selection: &StreamSelection,
) -> Result<Vec<FeaturePair>> {
    if base.size() != (FIDUCIAL_SIZE, FIDUCIAL_SIZE) {
        return Err(invalid_argument("build_pairs needs a canonical image"));
    }
    let f_base = extractor.extract(base)?.normalize();
    let transforms = selection.transforms();
    let mut frames = Vec::new();
    for &t in &transforms {
        if t != GeomTransform::IDENTITY {
            frames.push((t, frame_image(base, t)?));
        }
    }
    let encoded: Vec<Result<(GeomTransform, FeatureMap)>> =
        frames.into_par_iter().map(|(t, img)| Ok((t, extractor.extract(&img)?.normalize()))).collect();
    let mut by_transform: BTreeMap<String, FeatureMap> = BTreeMap::new();
    for e in encoded {
        let (t, f) = e?;
        by_transform.insert(t.to_string(), f);
    }
    Ok(transforms
        .into_iter()
        .map(|t| FeaturePair {
            base: f_base.clone(),
            aug: if t == GeomTransform::IDENTITY { f_base.clone() } else { by_transform.remove(&t.to_string()).unwrap() },
            transform: t,
        })
        .collect())
}

/// The eight pairs: four rotations (upright self-pair included) and four
/// zoom patches.
pub fn build_pairs(base: &Image, extractor: &dyn FeatureExtractor) -> Result<Vec<FeaturePair>> {
    build_pairs_with(base, extractor, &StreamSelection::full())
}

#[derive(Clone, Debug)]
pub struct StreamResult {
    /// Decoded from the rows of the affinity matrix, in the base frame.
    pub base_side: ProbabilityGrid,
    /// Decoded from its columns, in the augmented frame.
    pub aug_side: ProbabilityGrid,
    pub transform: GeomTransform,
}

impl StreamResult {
    pub fn max(&self) -> f32 {
        self.base_side.max().max(self.aug_side.max())
    }
}

/// Both similarity-tensor sides of a pair.
pub fn pair_tensors(pair: &FeaturePair, scale: f32) -> Result<(SimilarityTensor, SimilarityTensor)> {
    let s = similarity_matrix(&pair.base, &pair.aug, scale)?;
    Ok((reshape_to_maps(&s, Side::Rows), reshape_to_maps(&s, Side::Cols)))
}

pub fn run_stream(pair: &FeaturePair, models: &ModelSet) -> Result<StreamResult> {
    let model = models.get(pair.transform.direction())?;
    let (rows, cols) = pair_tensors(pair, DEFAULT_SCALE)?;
    decode_stream(model, &rows, &cols, pair.transform)
}

pub fn decode_stream(
    model: &CellDecoder<f32>,
    rows: &SimilarityTensor,
    cols: &SimilarityTensor,
    transform: GeomTransform,
) -> Result<StreamResult> {
    let base_side = model.decode_grid_framed(rows, GeomTransform::IDENTITY)?;
    let aug_side = if transform == GeomTransform::IDENTITY && rows.maps() == cols.maps() {
        // A self-pair's affinity matrix is symmetric: both sides coincide.
        base_side.clone()
    } else {
        model.decode_grid_framed(cols, transform)?
    };
    Ok(StreamResult { base_side, aug_side, transform })
}

/// Upsampled, mapped-back candidates of one stream in the base frame.
pub fn stream_candidates(result: &StreamResult, size: usize) -> Result<[Mask; 2]> {
    let base = upsample_to_mask(&result.base_side, size)?;
    let aug = map_mask_back(&upsample_to_mask(&result.aug_side, size)?, result.transform, size)?;
    Ok([base, aug])
}

const NEIGHBOURS_8: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Thresholds, drops small 8-connected components and computes the verdict.
pub fn postprocess(prob: &Mask, post: &PostprocessConfig) -> (Mask, Vec<usize>, bool) {
    let (h, w) = prob.size();
    let area = (h * w) as f64;
    let mut keep = prob.threshold(post.threshold).bits();
    let mut seen = vec![false; h * w];
    let mut areas = Vec::new();
    let mut stack = Vec::new();
    let mut members = Vec::new();
    for start in 0..h * w {
        if !keep[start] || seen[start] {
            continue;
        }
        members.clear();
        seen[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            members.push(p);
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for (dr, dc) in NEIGHBOURS_8 {
                let (y, x) = (r + dr, c + dc);
                if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
                    continue;
                }
                let q = y as usize * w + x as usize;
                if keep[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        if (members.len() as f64) < post.min_component_fraction * area {
            members.iter().for_each(|&p| keep[p] = false);
        } else {
            areas.push(members.len());
        }
    }
    let tampered: usize = areas.iter().sum();
    let verdict = tampered as f64 > post.verdict_fraction * area;
    (Mask::from_bools(h, w, &keep), areas, verdict)
}

#[derive(Clone, Debug)]
pub struct DetectionResult {
    pub probability: Mask,
    pub binary: Mask,
    pub verdict: bool,
    pub component_areas: Vec<usize>,
    pub per_stream_max: Vec<(String, f32)>,
    pub streams: Vec<StreamResult>,
    pub latency_ms: f64,
}

/// The per-image JSON record written next to the masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub verdict: bool,
    pub tampered_pixel_fraction: f64,
    pub component_areas: Vec<usize>,
    pub per_stream_max: BTreeMap<String, f32>,
    pub latency_ms: f64,
}

impl DetectionResult {
    pub fn tampered_pixel_fraction(&self) -> f64 {
        let (h, w) = self.binary.size();
        self.binary.count_positive() as f64 / (h * w) as f64
    }

    pub fn record(&self) -> DetectionRecord {
        DetectionRecord {
            verdict: self.verdict,
            tampered_pixel_fraction: self.tampered_pixel_fraction(),
            component_areas: self.component_areas.clone(),
            per_stream_max: self.per_stream_max.iter().cloned().collect(),
            latency_ms: self.latency_ms,
        }
    }
}

/// Max-fuses stream candidates at `base_size` and postprocesses at
/// `output_size`.
pub fn fuse_streams(
    results: Vec<StreamResult>,
    expected: usize,
    base_size: usize,
    output_size: (usize, usize),
    post: &PostprocessConfig,
) -> Result<DetectionResult> {
    if results.len() < expected || results.is_empty() {
        return Err(invalid_argument(format!("fusion needs {expected} stream results, got {}", results.len())));
    }
    let mut fused = Mask::zeros(base_size, base_size);
    for r in &results {
        for cand in stream_candidates(r, base_size)? {
            fused.max_with(&cand)?;
        }
    }
    let probability = if output_size == (base_size, base_size) {
        fused
    } else {
        resize_mask_nearest(&fused, output_size.0, output_size.1)?
    };
    let (binary, component_areas, verdict) = postprocess(&probability, post);
    let per_stream_max = results.iter().map(|r| (r.transform.to_string(), r.max())).collect();
    Ok(DetectionResult { probability, binary, verdict, component_areas, per_stream_max, streams: results, latency_ms: 0.0 })
}

/// Fuses the eight streams of one image at its fiducial resolution.
pub fn fuse(results: Vec<StreamResult>, base_size: usize, post: &PostprocessConfig) -> Result<DetectionResult> {
    fuse_streams(results, 8, base_size, (base_size, base_size), post)
}

#[derive(Clone, Debug)]
pub struct DetectOptions {
    pub selection: StreamSelection,
    pub postprocess: PostprocessConfig,
    /// Multiplier `c` applied to every cosine similarity.
    pub similarity_scale: f32,
    /// Writes one similarity-map mosaic per stream side into this directory.
    pub dump_similarity: Option<PathBuf>,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            selection: StreamSelection::default(),
            postprocess: PostprocessConfig::default(),
            similarity_scale: DEFAULT_SCALE,
            dump_similarity: None,
        }
    }
}

/// Canonicalize, encode, decode every selected stream and fuse; masks are
/// returned at the input's resolution.
pub fn detect(
    img: &Image,
    extractor: &dyn FeatureExtractor,
    models: &ModelSet,
    options: &DetectOptions,
) -> Result<DetectionResult> {
    let start = Instant::now();
    let canon = canonicalize(img)?;
    let pairs = build_pairs_with(&canon.image, extractor, &options.selection)?;
    if let Some(dir) = &options.dump_similarity {
        std::fs::create_dir_all(dir)?;
    }
    let results: Vec<Result<StreamResult>> = pairs
        .par_iter()
        .map(|pair| {
            let model = models.get(pair.transform.direction())?;
            let (rows, cols) = pair_tensors(pair, options.similarity_scale)?;
            if let Some(dir) = &options.dump_similarity {
                save_map_mosaic(&rows, dir.join(format!("{}_base.png", pair.transform)))?;
                save_map_mosaic(&cols, dir.join(format!("{}_aug.png", pair.transform)))?;
            }
            decode_stream(model, &rows, &cols, pair.transform)
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut out = fuse_streams(
        results,
        options.selection.stream_count(),
        FIDUCIAL_SIZE,
        canon.original_size,
        &options.postprocess,
    )?;
    out.latency_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Quadrant;

    fn grid(v: f32, frame: GeomTransform) -> ProbabilityGrid {
        ProbabilityGrid::new(32, vec![v; 1024], frame).unwrap()
    }

    fn streams(value_for: impl Fn(usize) -> f32) -> Vec<StreamResult> {
        StreamSelection::full()
            .transforms()
            .into_iter()
            .enumerate()
            .map(|(k, t)| StreamResult {
                base_side: grid(value_for(k), GeomTransform::IDENTITY),
                aug_side: grid(value_for(k), t),
                transform: t,
            })
            .collect()
    }

    #[test]
    fn selections_count_streams() {
        assert_eq!(StreamSelection::full().stream_count(), 8);
        assert_eq!(StreamSelection::rotations_only().stream_count(), 4);
        assert_eq!(StreamSelection::upright_only().stream_count(), 1);
    }

    #[test]
    fn all_zero_streams_give_negative_verdict() {
        let d = fuse(streams(|_| 0.0), 256, &PostprocessConfig::default()).unwrap();
        assert_eq!(d.binary.count_positive(), 0);
        assert!(!d.verdict);
    }

    #[test]
    fn one_hot_stream_dominates() {
        let d = fuse(streams(|k| if k == 2 { 1.0 } else { 0.0 }), 256, &PostprocessConfig::default()).unwrap();
        assert_eq!(d.binary.count_positive(), 256 * 256);
        assert!(d.verdict);
    }

    #[test]
    fn zoom_only_stream_covers_its_quadrant() {
        let mut s = streams(|_| 0.0);
        let patch = s.iter_mut().find(|r| r.transform == GeomTransform::ZoomPatch(Quadrant::BottomRight)).unwrap();
        patch.aug_side = grid(1.0, patch.transform);
        let d = fuse(s, 256, &PostprocessConfig::default()).unwrap();
        assert_eq!(d.binary.count_positive(), 128 * 128);
        assert_eq!(d.binary.get(200, 200), 1.0);
        assert_eq!(d.binary.get(100, 200), 0.0);
    }

    #[test]
    fn fewer_streams_are_rejected() {
        let mut s = streams(|_| 0.0);
        s.pop();
        assert!(matches!(fuse(s, 256, &PostprocessConfig::default()), Err(Error::InvalidArgument(_))));
    }

    fn block(n: usize, pixels: usize) -> Mask {
        let mut m = Mask::zeros(n, n);
        for p in 0..pixels {
            m.set(10 + p / 20, 10 + p % 20, 1.0);
        }
        m
    }

    #[test]
    fn verdict_boundary_at_256() {
        let post = PostprocessConfig::default();
        let (_, _, v131) = postprocess(&block(256, 131), &post);
        let (_, _, v132) = postprocess(&block(256, 132), &post);
        assert!(!v131);
        assert!(v132);
    }

    #[test]
    fn small_components_are_dropped() {
        let mut m = block(256, 200);
        // A 65-pixel component is below 0.1% of 65,536 (65.536).
        for p in 0..65 {
            m.set(150 + p / 13, 150 + p % 13, 1.0);
        }
        // Diagonal neighbours join under 8-connectivity.
        m.set(100, 100, 1.0);
        m.set(101, 101, 1.0);
        let (binary, areas, _) = postprocess(&m, &PostprocessConfig::default());
        assert_eq!(areas, vec![200]);
        assert_eq!(binary.count_positive(), 200);
        let mut diag = Mask::zeros(256, 256);
        for k in 0..70 {
            diag.set(k, k, 1.0);
        }
        let (_, areas, _) = postprocess(&diag, &PostprocessConfig::default());
        assert_eq!(areas, vec![70]);
    }
}
