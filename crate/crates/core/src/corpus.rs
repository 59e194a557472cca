//! Segmentation-annotated source imagery for forgery synthesis.
//!
//! A corpus is a directory holding images plus `annotations.json`:
//!
//! ```json
//! {
//!   "images": [
//!     {
//!       "file": "images/00000.png",
//!       "objects": [
//!         { "id": 0, "polygon": [[12.0, 30.5], [80.0, 31.0], [44.0, 99.0]] },
//!         { "id": 1, "bitmap": "bitmaps/00000_1.png" }
//!       ]
//!     }
//!   ]
//! }
//! ```
//!
//! Paths are relative to the corpus directory. Polygon vertices are `[x, y]`
//! in pixels; a pixel belongs to the polygon when its centre does (even-odd
//! rule). Bitmaps are 8-bit grayscale PNGs of the image's size, positive above
//! 127.
//!
//! [`generate_corpus`] writes a procedural corpus in this format: multi-octave
//! value-noise backgrounds with a few non-overlapping textured shapes.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, Mask};

pub const ANNOTATION_FILE: &str = "annotations.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Shape {
    Polygon { polygon: Vec<[f64; 2]> },
    Bitmap { bitmap: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub id: u32,
    #[serde(flatten)]
    pub shape: Shape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageAnnotation {
    pub file: String,
    pub objects: Vec<ObjectAnnotation>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    pub images: Vec<ImageAnnotation>,
}

/// A corpus directory with its parsed annotation file.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub annotations: Annotations,
}

impl Corpus {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let path = root.join(ANNOTATION_FILE);
        let ingest = |reason: String| Error::Ingestion { path: path.clone(), reason };
        let text = fs::read_to_string(&path).map_err(|e| ingest(e.to_string()))?;
        let annotations = serde_json::from_str(&text).map_err(|e| ingest(e.to_string()))?;
        Ok(Self { root, annotations })
    }

    pub fn load_image(&self, index: usize) -> Result<Image> {
        let file = &self.annotations.images[index].file;
        Image::load(self.root.join(file))
    }

    /// Rasterizes one object's footprint at the given image size.
    pub fn object_mask(&self, object: &ObjectAnnotation, height: usize, width: usize) -> Result<Mask> {
        match &object.shape {
            Shape::Polygon { polygon } => Ok(rasterize_polygon(polygon, height, width)),
            Shape::Bitmap { bitmap } => {
                let path = self.root.join(bitmap);
                let mask = Mask::load_binary(&path)
                    .map_err(|e| Error::Ingestion { path: path.clone(), reason: e.to_string() })?;
                if mask.size() != (height, width) {
                    return Err(Error::Ingestion {
                        path,
                        reason: format!("bitmap is {:?}, image is {:?}", mask.size(), (height, width)),
                    });
                }
                Ok(mask)
            }
        }
    }
}

/// Even-odd fill sampled at pixel centres.
pub fn rasterize_polygon(polygon: &[[f64; 2]], height: usize, width: usize) -> Mask {
    let mut bits = vec![false; height * width];
    if polygon.len() >= 3 {
        let mut xs = Vec::new();
        for r in 0..height {
            let y = r as f64 + 0.5;
            xs.clear();
            for k in 0..polygon.len() {
                let [x0, y0] = polygon[k];
                let [x1, y1] = polygon[(k + 1) % polygon.len()];
                if (y0 <= y) != (y1 <= y) {
                    xs.push(x0 + (y - y0) * (x1 - x0) / (y1 - y0));
                }
            }
            xs.sort_by(f64::total_cmp);
            for pair in xs.chunks_exact(2) {
                // Pixel c is inside when pair[0] <= c + 0.5 < pair[1].
                let c0 = (pair[0] - 0.5).ceil().max(0.0) as usize;
                let c1 = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(width);
                for c in c0..c1 {
                    bits[r * width + c] = true;
                }
            }
        }
    }
    Mask::from_bools(height, width, &bits)
}

/// Object area and bounding box `(height, width)` in pixels.
pub fn footprint_stats(mask: &Mask) -> (usize, usize, usize) {
    let (h, w) = mask.size();
    let (mut r0, mut r1, mut c0, mut c1, mut area) = (usize::MAX, 0, usize::MAX, 0, 0);
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) >= 0.5 {
                area += 1;
                r0 = r0.min(r);
                r1 = r1.max(r);
                c0 = c0.min(c);
                c1 = c1.max(c);
            }
        }
    }
    if area == 0 {
        (0, 0, 0)
    } else {
        (area, r1 - r0 + 1, c1 - c0 + 1)
    }
}

/// Multi-octave value noise in `[0, 1]`.
pub struct ValueNoise {
    octaves: Vec<(usize, Vec<f32>)>,
}

impl ValueNoise {
    pub fn new<R: Rng>(rng: &mut R, base_cells: usize, octaves: usize) -> Self {
        let octaves = (0..octaves)
            .map(|o| {
                let cells = base_cells << o;
                (cells, (0..(cells + 1) * (cells + 1)).map(|_| rng.gen::<f32>()).collect())
            })
            .collect();
        Self { octaves }
    }

    /// Samples at normalized coordinates `u, v` in `[0, 1]`.
    pub fn sample(&self, u: f32, v: f32) -> f32 {
        let mut total = 0.0;
        let mut weight = 0.0;
        let mut amp = 1.0;
        for (cells, lattice) in &self.octaves {
            let n = *cells;
            let x = u * n as f32;
            let y = v * n as f32;
            let (xi, yi) = ((x as usize).min(n - 1), (y as usize).min(n - 1));
            let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
            let (tx, ty) = (smooth(x - xi as f32), smooth(y - yi as f32));
            let at = |r: usize, c: usize| lattice[r * (n + 1) + c];
            let top = at(yi, xi) + (at(yi, xi + 1) - at(yi, xi)) * tx;
            let bottom = at(yi + 1, xi) + (at(yi + 1, xi + 1) - at(yi + 1, xi)) * tx;
            total += amp * (top + (bottom - top) * ty);
            weight += amp;
            amp *= 0.55;
        }
        total / weight
    }
}

/// A random colour texture: noise mapped through a two-colour ramp with
/// per-channel jitter.
struct Texture {
    noise: ValueNoise,
    jitter: ValueNoise,
    lo: [f32; 3],
    hi: [f32; 3],
}

impl Texture {
    fn new<R: Rng>(rng: &mut R) -> Self {
        let base = rng.gen_range(2..8);
        let mut color = || [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
        let (lo, hi) = (color(), color());
        Self { noise: ValueNoise::new(rng, base, 5), jitter: ValueNoise::new(rng, base * 4, 2), lo, hi }
    }

    fn color(&self, u: f32, v: f32) -> [f32; 3] {
        let t = self.noise.sample(u, v);
        let j = self.jitter.sample(u, v) - 0.5;
        let mut rgb = [0.0; 3];
        for k in 0..3 {
            rgb[k] = (self.lo[k] + (self.hi[k] - self.lo[k]) * t + 0.25 * j).clamp(0.0, 1.0);
        }
        rgb
    }
}

/// Settings for [`generate_corpus`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub max_objects: usize,
    /// Probability that an object is stored as a bitmap instead of a polygon.
    pub bitmap_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { count: 200, size: 256, seed: 0, max_objects: 3, bitmap_fraction: 0.25 }
    }
}

/// A star-shaped polygon around `(cx, cy)`.
fn random_polygon<R: Rng>(rng: &mut R, cx: f64, cy: f64, radius: f64) -> Vec<[f64; 2]> {
    let n = rng.gen_range(5..13);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let ellipse = rng.gen_range(0.75..1.0);
    (0..n)
        .map(|k| {
            let a = phase + std::f64::consts::TAU * k as f64 / n as f64;
            let r = radius * rng.gen_range(0.8..1.0);
            [cx + r * a.cos(), cy + r * a.sin() * ellipse]
        })
        .collect()
}

/// Writes a procedural corpus into `root` and returns its annotations.
pub fn generate_corpus(root: impl AsRef<Path>, config: &CorpusConfig) -> Result<Annotations> {
    let root = root.as_ref();
    fs::create_dir_all(root.join("images"))?;
    fs::create_dir_all(root.join("bitmaps"))?;
    let n = config.size;
    let mut annotations = Annotations::default();
    for index in 0..config.count {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(index as u64);
        let background = Texture::new(&mut rng);
        let mut img = Image::from_fn(n, n, |r, c| background.color(c as f32 / n as f32, r as f32 / n as f32));
        let mut occupied: Vec<[f64; 4]> = Vec::new();
        let mut objects = Vec::new();
        let wanted = rng.gen_range(1..=config.max_objects.max(1));
        for _ in 0..wanted * 10 {
            if objects.len() == wanted {
                break;
            }
            let radius = rng.gen_range(0.16..0.28) * n as f64;
            let cx = rng.gen_range(radius..n as f64 - radius);
            let cy = rng.gen_range(radius..n as f64 - radius);
            let bbox = [cx - radius, cy - radius, cx + radius, cy + radius];
            if occupied.iter().any(|o| bbox[0] < o[2] && o[0] < bbox[2] && bbox[1] < o[3] && o[1] < bbox[3]) {
                continue;
            }
            occupied.push(bbox);
            let polygon = random_polygon(&mut rng, cx, cy, radius);
            let mask = rasterize_polygon(&polygon, n, n);
            let texture = Texture::new(&mut rng);
            for r in 0..n {
                for c in 0..n {
                    if mask.get(r, c) >= 0.5 {
                        img.set_pixel(r, c, texture.color(c as f32 / n as f32, r as f32 / n as f32));
                    }
                }
            }
            let id = objects.len() as u32;
            let shape = if rng.gen_bool(config.bitmap_fraction.clamp(0.0, 1.0)) {
                let file = format!("bitmaps/{index:05}_{id}.png");
                mask.save_png(root.join(&file))?;
                Shape::Bitmap { bitmap: file }
            } else {
                Shape::Polygon { polygon }
            };
            objects.push(ObjectAnnotation { id, shape });
        }
        let file = format!("images/{index:05}.png");
        img.save(root.join(&file))?;
        annotations.images.push(ImageAnnotation { file, objects });
    }
    fs::write(root.join(ANNOTATION_FILE), serde_json::to_string_pretty(&annotations)?)?;
    Ok(annotations)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rasterized_rectangle_has_exact_area() {
        let poly = [[10.0, 20.0], [50.0, 20.0], [50.0, 45.0], [10.0, 45.0]];
        let m = rasterize_polygon(&poly, 64, 64);
        assert_eq!(footprint_stats(&m), (40 * 25, 25, 40));
        assert!(m.get(20, 10) == 1.0 && m.get(19, 10) == 0.0 && m.get(20, 50) == 0.0);
    }

    #[test]
    fn annotation_json_accepts_both_shapes() {
        let text = r#"{"images":[{"file":"a.png","objects":[{"id":0,"polygon":[[0,0],[4,0],[4,4]]},{"id":1,"bitmap":"b.png"}]}]}"#;
        let a: Annotations = serde_json::from_str(text).unwrap();
        assert!(matches!(a.images[0].objects[0].shape, Shape::Polygon { .. }));
        assert!(matches!(a.images[0].objects[1].shape, Shape::Bitmap { .. }));
        let back: Annotations = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn generated_corpus_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig { count: 3, size: 128, seed: 5, ..Default::default() };
        let a = generate_corpus(dir.path(), &cfg).unwrap();
        let corpus = Corpus::open(dir.path()).unwrap();
        assert_eq!(corpus.annotations, a);
        let img = corpus.load_image(0).unwrap();
        assert_eq!(img.size(), (128, 128));
        for obj in &a.images[0].objects {
            let (area, _, _) = footprint_stats(&corpus.object_mask(obj, 128, 128).unwrap());
            assert!(area > 0);
        }
    }
}
