//! Copy-move forgery synthesis from an annotated corpus.
//!
//! An object's footprint is copied, rotated counter-clockwise by the sampled
//! angle and scaled about its centre (bilinear), then hard-pasted at a random
//! in-bounds location of the same image. The ground-truth mask is the union of
//! the source and target footprints.
//!
//! A dataset directory holds `images/`, `masks/` and `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{footprint_stats, Corpus};
use crate::error::{invalid_argument, Error, Result};
use crate::imaging::{Image, Mask, Rotation};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MIN_OBJECT_AREA: usize = 1000;
pub const MIN_OBJECT_SIDE: usize = 64;

/// Selection rule: area above 1000 pixels and both bounding-box sides above 64.
pub fn qualifies(area: usize, bbox_height: usize, bbox_width: usize) -> bool {
    area > MIN_OBJECT_AREA && bbox_height.min(bbox_width) > MIN_OBJECT_SIDE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub image: usize,
    pub object: u32,
    pub area: usize,
    pub bbox: (usize, usize),
}

/// Every annotated object passing [`qualifies`].
pub fn select_objects(corpus: &Corpus) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for (index, entry) in corpus.annotations.images.iter().enumerate() {
        let path = corpus.root.join(&entry.file);
        let (w, h) = image::image_dimensions(&path).map_err(|e| Error::Ingestion { path, reason: e.to_string() })?;
        for obj in &entry.objects {
            let mask = corpus.object_mask(obj, h as usize, w as usize)?;
            let (area, bh, bw) = footprint_stats(&mask);
            if qualifies(area, bh, bw) {
                out.push(Candidate { image: index, object: obj.id, area, bbox: (bh, bw) });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForgeConfig {
    /// Rotation sampled uniformly from `[min, max)` degrees; equal ends fix it.
    pub rotation_range: (f64, f64),
    /// Scale sampled uniformly from `[min, max]`.
    pub scale_range: (f64, f64),
    pub placement_attempts: usize,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        Self { rotation_range: (0.0, 360.0), scale_range: (0.8, 1.2), placement_attempts: 20 }
    }
}

impl ForgeConfig {
    /// Identity transform: the target is a pixel-exact copy of the source.
    pub fn exact_copy() -> Self {
        Self::fixed(0.0, 1.0)
    }

    pub fn fixed(angle: f64, scale: f64) -> Self {
        Self { rotation_range: (angle, angle), scale_range: (scale, scale), ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        let (a0, a1) = self.rotation_range;
        let (s0, s1) = self.scale_range;
        if !(a0 <= a1 && s0 > 0.0 && s0 <= s1 && self.placement_attempts > 0) {
            return Err(invalid_argument("forge config has an empty range or no placement attempts"));
        }
        Ok(())
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> (f64, f64) {
        let (a0, a1) = self.rotation_range;
        let (s0, s1) = self.scale_range;
        let angle = if a0 == a1 { a0 } else { rng.gen_range(a0..a1) };
        let scale = if s0 == s1 { s0 } else { rng.gen_range(s0..=s1) };
        (angle.rem_euclid(360.0), scale)
    }
}

#[derive(Clone, Debug)]
pub struct ForgeryRecord {
    pub image: Image,
    pub mask: Mask,
    pub rotation_angle: f64,
    pub scale_factor: f64,
    pub shape_decoupled: bool,
    /// Whether a placement disjoint from the source footprint was found.
    pub disjoint: bool,
    pub source_area: usize,
    pub target_area: usize,
    /// Top-left corner of the source footprint's bounding box.
    pub source_origin: (usize, usize),
    /// Top-left corner of the pasted canvas.
    pub target_origin: (usize, usize),
}

/// Tight crop of the object's bounding box.
struct Patch {
    height: usize,
    width: usize,
    rgb: Vec<[f32; 3]>,
    alpha: Vec<f32>,
}

fn crop_object(img: &Image, mask: &Mask) -> Option<(Patch, (usize, usize))> {
    let (h, w) = mask.size();
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) >= 0.5 {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return None;
    }
    let (ph, pw) = (r1 - r0 + 1, c1 - c0 + 1);
    let mut rgb = Vec::with_capacity(ph * pw);
    let mut alpha = Vec::with_capacity(ph * pw);
    for r in r0..=r1 {
        for c in c0..=c1 {
            rgb.push(img.pixel(r, c));
            alpha.push(if mask.get(r, c) >= 0.5 { 1.0 } else { 0.0 });
        }
    }
    Some((Patch { height: ph, width: pw, rgb, alpha }, (r0, c0)))
}

fn quarter_turn_patch(p: &Patch, turns: usize) -> Patch {
    let (h, w) = (p.height, p.width);
    let (oh, ow) = if turns % 2 == 1 { (w, h) } else { (h, w) };
    let mut rgb = Vec::with_capacity(oh * ow);
    let mut alpha = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            let (sr, sc) = match turns % 4 {
                0 => (r, c),
                1 => (c, w - 1 - r),
                2 => (h - 1 - r, w - 1 - c),
                _ => (h - 1 - c, r),
            };
            rgb.push(p.rgb[sr * w + sc]);
            alpha.push(p.alpha[sr * w + sc]);
        }
    }
    Patch { height: oh, width: ow, rgb, alpha }
}

/// Counter-clockwise rotation by `angle` degrees and uniform scaling about
/// the patch centre, bilinear, onto the tight enclosing canvas. Alpha is
/// re-binarized at 0.5.
fn transform_patch(p: &Patch, angle: f64, scale: f64) -> Patch {
    if scale == 1.0 && angle.rem_euclid(90.0) == 0.0 {
        return quarter_turn_patch(p, (angle.rem_euclid(360.0) / 90.0) as usize);
    }
    let (sin, cos) = angle.to_radians().sin_cos();
    let (h, w) = (p.height as f64, p.width as f64);
    let ow = (scale * (cos.abs() * w + sin.abs() * h)).ceil().max(1.0) as usize;
    let oh = (scale * (sin.abs() * w + cos.abs() * h)).ceil().max(1.0) as usize;
    let mut rgb = vec![[0.0f32; 3]; oh * ow];
    let mut alpha = vec![0.0f32; oh * ow];
    let sample = |y: f64, x: f64| -> Option<([f32; 3], f32)> {
        if y < -0.5 || x < -0.5 || y > h - 0.5 || x > w - 0.5 {
            return None;
        }
        let y = y.clamp(0.0, h - 1.0);
        let x = x.clamp(0.0, w - 1.0);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(p.height - 1), (x0 + 1).min(p.width - 1));
        let (ty, tx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
        let idx = |r: usize, c: usize| r * p.width + c;
        let mix = |a: f32, b: f32, t: f32| a + (b - a) * t;
        let mut out = [0.0f32; 3];
        for k in 0..3 {
            let top = mix(p.rgb[idx(y0, x0)][k], p.rgb[idx(y0, x1)][k], tx);
            let bottom = mix(p.rgb[idx(y1, x0)][k], p.rgb[idx(y1, x1)][k], tx);
            out[k] = mix(top, bottom, ty);
        }
        let top = mix(p.alpha[idx(y0, x0)], p.alpha[idx(y0, x1)], tx);
        let bottom = mix(p.alpha[idx(y1, x0)], p.alpha[idx(y1, x1)], tx);
        Some((out, mix(top, bottom, ty)))
    };
    for r in 0..oh {
        for c in 0..ow {
            // Output offset from the canvas centre, mapped back to the source.
            let dx = c as f64 + 0.5 - ow as f64 / 2.0;
            let dy = r as f64 + 0.5 - oh as f64 / 2.0;
            let sx = (dx * cos - dy * sin) / scale + w / 2.0 - 0.5;
            let sy = (dx * sin + dy * cos) / scale + h / 2.0 - 0.5;
            if let Some((v, a)) = sample(sy, sx) {
                if a >= 0.5 {
                    rgb[r * ow + c] = v;
                    alpha[r * ow + c] = 1.0;
                }
            }
        }
    }
    Patch { height: oh, width: ow, rgb, alpha }
}

/// Copies the object under `object_mask`, transforms it and pastes it
/// elsewhere in the same image.
pub fn forge<R: Rng>(img: &Image, object_mask: &Mask, config: &ForgeConfig, rng: &mut R) -> Result<ForgeryRecord> {
    config.validate()?;
    if img.size() != object_mask.size() {
        return Err(invalid_argument("object mask and image sizes differ"));
    }
    let (patch, source_origin) = crop_object(img, object_mask).ok_or_else(|| invalid_argument("object mask is empty"))?;
    let (angle, scale) = config.sample(rng);
    let moved = transform_patch(&patch, angle, scale);
    let (h, w) = img.size();
    if moved.height > h || moved.width > w {
        return Err(invalid_argument(format!(
            "transformed object {}x{} does not fit the {h}x{w} image",
            moved.height, moved.width
        )));
    }
    let overlaps = |tr: usize, tc: usize| {
        (0..moved.height).any(|r| {
            (0..moved.width).any(|c| moved.alpha[r * moved.width + c] > 0.0 && object_mask.get(tr + r, tc + c) >= 0.5)
        })
    };
    let mut placement = (0, 0);
    let mut disjoint = false;
    for _ in 0..config.placement_attempts {
        placement = (rng.gen_range(0..=h - moved.height), rng.gen_range(0..=w - moved.width));
        if !overlaps(placement.0, placement.1) {
            disjoint = true;
            break;
        }
    }
    let mut image = img.clone();
    let mut mask = object_mask.threshold(0.5);
    let mut target_area = 0;
    for r in 0..moved.height {
        for c in 0..moved.width {
            if moved.alpha[r * moved.width + c] > 0.0 {
                let (y, x) = (placement.0 + r, placement.1 + c);
                image.set_pixel(y, x, moved.rgb[r * moved.width + c]);
                mask.set(y, x, 1.0);
                target_area += 1;
            }
        }
    }
    let (source_area, _, _) = footprint_stats(object_mask);
    Ok(ForgeryRecord {
        image,
        mask,
        rotation_angle: angle,
        scale_factor: scale,
        shape_decoupled: false,
        disjoint,
        source_area,
        target_area,
        source_origin,
        target_origin: placement,
    })
}

/// Places the donor's footprint at a random location of `content` and forges
/// that region within `content`.
pub fn forge_shape_decoupled<R: Rng>(
    donor_mask: &Mask,
    content: &Image,
    config: &ForgeConfig,
    rng: &mut R,
) -> Result<ForgeryRecord> {
    let (dh, dw) = donor_mask.size();
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for r in 0..dh {
        for c in 0..dw {
            if donor_mask.get(r, c) >= 0.5 {
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if r0 == usize::MAX {
        return Err(invalid_argument("donor mask is empty"));
    }
    let (bh, bw) = (r1 - r0 + 1, c1 - c0 + 1);
    let (h, w) = content.size();
    if bh > h || bw > w {
        return Err(invalid_argument("donor shape does not fit the content image"));
    }
    let (tr, tc) = (rng.gen_range(0..=h - bh), rng.gen_range(0..=w - bw));
    let mut placed = Mask::zeros(h, w);
    for r in 0..bh {
        for c in 0..bw {
            if donor_mask.get(r0 + r, c0 + c) >= 0.5 {
                placed.set(tr + r, tc + c, 1.0);
            }
        }
    }
    let mut record = forge(content, &placed, config, rng)?;
    record.shape_decoupled = true;
    Ok(record)
}

/// Half-open direction bin `[θ − 45°, θ + 45°)` containing `angle`.
pub fn direction_bin(angle: f64) -> Rotation {
    let a = angle.rem_euclid(360.0);
    Rotation::from_quarter_turns((((a + 45.0) / 90.0).floor() as i64).rem_euclid(4))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub count: usize,
    pub seed: u64,
    pub forge: ForgeConfig,
    pub shape_decoupled_fraction: f64,
    /// Object draws per record before the record is skipped.
    pub max_draws: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { count: 2000, seed: 0, forge: ForgeConfig::default(), shape_decoupled_fraction: 0.0, max_draws: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub file: String,
    pub mask_file: String,
    pub rotation_angle: f64,
    pub scale_factor: f64,
    pub shape_decoupled: bool,
    pub seed: u64,
    pub source_image: String,
    pub source_object: u32,
    pub disjoint: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub records: Vec<ManifestRecord>,
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Ingestion { path: path.to_path_buf(), reason: e.to_string() })?;
        serde_json::from_str(&text).map_err(|e| Error::Ingestion { path: path.to_path_buf(), reason: e.to_string() })
    }

    pub fn direction_records(&self, theta: Rotation) -> Vec<&ManifestRecord> {
        self.records.iter().filter(|r| direction_bin(r.rotation_angle) == theta).collect()
    }
}

/// Deterministic per-record seed derived from the master seed and index.
pub fn record_seed(master: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index as u64);
    rng.gen()
}

/// A dataset directory with its manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let manifest = Manifest::load(root.join(MANIFEST_FILE))?;
        Ok(Self { root, manifest })
    }

    pub fn load(&self, record: &ManifestRecord) -> Result<(Image, Mask)> {
        Ok((Image::load(self.root.join(&record.file))?, Mask::load_binary(self.root.join(&record.mask_file))?))
    }
}

fn synthesize_record(
    corpus: &Corpus,
    candidates: &[Candidate],
    config: &DatasetConfig,
    index: usize,
) -> (Option<(ForgeryRecord, ManifestRecord)>, Vec<String>) {
    let seed = record_seed(config.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut warnings = Vec::new();
    for _ in 0..config.max_draws.max(1) {
        let cand = &candidates[rng.gen_range(0..candidates.len())];
        let entry = &corpus.annotations.images[cand.image];
        let attempt = (|| -> Result<ForgeryRecord> {
            let img = corpus.load_image(cand.image)?;
            let object = entry.objects.iter().find(|o| o.id == cand.object).expect("candidate refers to an object");
            let mask = corpus.object_mask(object, img.height(), img.width())?;
            if rng.gen_bool(config.shape_decoupled_fraction.clamp(0.0, 1.0)) {
                let other = corpus.load_image(rng.gen_range(0..corpus.annotations.images.len()))?;
                forge_shape_decoupled(&mask, &other, &config.forge, &mut rng)
            } else {
                forge(&img, &mask, &config.forge, &mut rng)
            }
        })();
        match attempt {
            Ok(rec) => {
                let meta = ManifestRecord {
                    file: format!("images/{index:05}.png"),
                    mask_file: format!("masks/{index:05}.png"),
                    rotation_angle: rec.rotation_angle,
                    scale_factor: rec.scale_factor,
                    shape_decoupled: rec.shape_decoupled,
                    seed,
                    source_image: entry.file.clone(),
                    source_object: cand.object,
                    disjoint: rec.disjoint,
                };
                return (Some((rec, meta)), warnings);
            }
            Err(e) => warnings.push(format!("record {index}: skipped draw of {}#{}: {e}", entry.file, cand.object)),
        }
    }
    warnings.push(format!("record {index}: no usable object after {} draws", config.max_draws));
    (None, warnings)
}

/// Synthesizes `config.count` forgeries into `out` and writes the manifest.
/// Records are generated in parallel on the current rayon pool; output does
/// not depend on scheduling.
pub fn build_dataset(corpus: &Corpus, config: &DatasetConfig, out: impl AsRef<Path>) -> Result<Manifest> {
    config.forge.validate()?;
    let out = out.as_ref();
    let candidates = select_objects(corpus)?;
    if candidates.is_empty() {
        return Err(Error::Ingestion { path: corpus.root.clone(), reason: "no qualifying objects".into() });
    }
    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("masks"))?;
    let results: Vec<Result<(Option<ManifestRecord>, Vec<String>)>> = (0..config.count)
        .into_par_iter()
        .map(|index| {
            let (rec, warnings) = synthesize_record(corpus, &candidates, config, index);
            let meta = match rec {
                Some((rec, meta)) => {
                    rec.image.save(out.join(&meta.file))?;
                    rec.mask.save_png(out.join(&meta.mask_file))?;
                    Some(meta)
                }
                None => None,
            };
            Ok((meta, warnings))
        })
        .collect();
    let mut manifest = Manifest { config: config.clone(), records: Vec::new(), warnings: Vec::new() };
    for r in results {
        let (meta, warnings) = r?;
        manifest.records.extend(meta);
        manifest.warnings.extend(warnings);
    }
    if manifest.records.len() < config.count {
        manifest
            .warnings
            .push(format!("dataset holds {} of {} requested records", manifest.records.len(), config.count));
    }
    fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::rasterize_polygon;

    fn textured(n: usize) -> Image {
        Image::from_fn(n, n, |r, c| [((r * 7 + c * 3) % 17) as f32 / 16.0, ((r * c) % 13) as f32 / 12.0, 0.5])
    }

    #[test]
    fn selection_thresholds() {
        assert!(!qualifies(999, 100, 100));
        assert!(!qualifies(1000, 100, 100));
        assert!(!qualifies(5000, 63, 200));
        assert!(!qualifies(5000, 64, 200));
        assert!(qualifies(5000, 80, 90));
    }

    #[test]
    fn exact_copy_reproduces_source_pixels() {
        let img = textured(128);
        let poly = [[10.0, 10.0], [40.0, 12.0], [36.0, 44.0], [12.0, 38.0]];
        let obj = rasterize_polygon(&poly, 128, 128);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rec = forge(&img, &obj, &ForgeConfig::exact_copy(), &mut rng).unwrap();
        assert!(rec.disjoint);
        assert_eq!(rec.source_area, rec.target_area);
        assert_eq!(rec.mask.count_positive(), rec.source_area + rec.target_area);
        // Locate the pasted footprint and compare pixel by pixel.
        let (patch, (r0, c0)) = crop_object(&img, &obj).unwrap();
        let target: Vec<(usize, usize)> = (0..128 * 128)
            .map(|i| (i / 128, i % 128))
            .filter(|&(r, c)| rec.mask.get(r, c) == 1.0 && obj.get(r, c) == 0.0)
            .collect();
        let (tr, tc) = target.iter().fold((usize::MAX, usize::MAX), |a, &(r, c)| (a.0.min(r), a.1.min(c)));
        for r in 0..patch.height {
            for c in 0..patch.width {
                if patch.alpha[r * patch.width + c] > 0.0 {
                    assert_eq!(rec.image.pixel(tr + r, tc + c), img.pixel(r0 + r, c0 + c));
                }
            }
        }
    }

    #[test]
    fn quarter_turns_compose_to_identity() {
        let p = Patch {
            height: 3,
            width: 5,
            rgb: (0..15).map(|i| [i as f32, 0.0, 0.0]).collect(),
            alpha: vec![1.0; 15],
        };
        let back = quarter_turn_patch(&quarter_turn_patch(&p, 1), 3);
        assert_eq!(back.rgb, p.rgb);
        // Counter-clockwise: the top-right corner becomes the top-left.
        assert_eq!(quarter_turn_patch(&p, 1).rgb[0], p.rgb[4]);
    }

    #[test]
    fn general_angle_agrees_with_quarter_turn_away_from_edges() {
        let p = Patch {
            height: 20,
            width: 20,
            rgb: (0..400).map(|i| [(i % 20) as f32 / 20.0, (i / 20) as f32 / 20.0, 0.0]).collect(),
            alpha: vec![1.0; 400],
        };
        let exact = quarter_turn_patch(&p, 1);
        let general = transform_patch(&p, 90.0 + 1e-9, 1.0);
        assert_eq!((general.height, general.width), (21, 21));
        // The general canvas is one pixel larger; compare interior samples.
        for r in 2..18 {
            for c in 2..18 {
                let a = exact.rgb[r * 20 + c];
                let b = general.rgb[r * 21 + c];
                assert!((a[0] - b[0]).abs() < 0.06 && (a[1] - b[1]).abs() < 0.06, "{r},{c}: {a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn oversized_object_is_rejected() {
        let img = textured(64);
        let obj = Mask::ones(64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(forge(&img, &obj, &ForgeConfig::fixed(45.0, 1.0), &mut rng).is_err());
    }

    #[test]
    fn direction_bins_are_half_open() {
        assert_eq!(direction_bin(0.0), Rotation::R0);
        assert_eq!(direction_bin(44.999), Rotation::R0);
        assert_eq!(direction_bin(45.0), Rotation::R90);
        assert_eq!(direction_bin(134.9), Rotation::R90);
        assert_eq!(direction_bin(135.0), Rotation::R180);
        assert_eq!(direction_bin(225.0), Rotation::R270);
        assert_eq!(direction_bin(314.99), Rotation::R270);
        assert_eq!(direction_bin(315.0), Rotation::R0);
        assert_eq!(direction_bin(-10.0), Rotation::R0);
    }

    #[test]
    fn shape_decoupled_sets_flag() {
        let content = textured(128);
        let donor = rasterize_polygon(&[[60.0, 60.0], [100.0, 62.0], [90.0, 100.0]], 128, 128);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rec = forge_shape_decoupled(&donor, &content, &ForgeConfig::exact_copy(), &mut rng).unwrap();
        assert!(rec.shape_decoupled);
        assert_eq!(rec.source_area, footprint_stats(&donor).0);
    }
}
