//! Image and mask rasters plus every geometric operation the detector needs:
//! canonical resizing, quantized rotation, zoom-patch slicing and the inverse
//! mapping of per-frame masks back into the base frame.
//!
//! Orientation convention: a quarter turn rotates the picture counterclockwise
//! as displayed (row 0 at the top). Under a quarter turn the top-left pixel of
//! an `n × n` image lands at `(n - 1, 0)`.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_argument, invalid_input, Result};

/// Side length every query is resampled to before feature extraction.
pub const FIDUCIAL_SIZE: usize = 256;

/// An RGB raster with channel values in `[0, 1]`, stored row-major, interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid_input("image has a zero-sized dimension"));
        }
        if data.len() != height * width * 3 {
            return Err(invalid_input(format!(
                "expected {} values for a {height}x{width} RGB image, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid_input(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                data.extend(f(r, c).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        for (k, v) in rgb.iter().enumerate() {
            self.data[i + k] = v.clamp(0.0, 1.0);
        }
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self::new(h as usize, w as usize, data)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size matches")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        Self::from_rgb8(&img)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save(path)?;
        Ok(())
    }
}

/// A single-channel map over an image, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<f32>,
    binary: bool,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(invalid_input(format!(
                "expected {} mask values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(invalid_input(format!("mask value {v} outside [0, 1]")));
        }
        Ok(Self { height, width, data, binary: false })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![0.0; height * width], binary: true }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, data: vec![1.0; height * width], binary: true }
    }

    pub fn from_bools(height: usize, width: usize, bits: &[bool]) -> Self {
        assert_eq!(bits.len(), height * width);
        let data = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Self { height, width, data, binary: true }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    /// Writes a value; the mask stays binary only if the value is 0 or 1.
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        let v = value.clamp(0.0, 1.0);
        if v != 0.0 && v != 1.0 {
            self.binary = false;
        }
        self.data[row * self.width + col] = v;
    }

    /// Pixels at or above `threshold` become 1, the rest 0.
    pub fn threshold(&self, threshold: f32) -> Mask {
        let data = self.data.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect();
        Mask { height: self.height, width: self.width, data, binary: true }
    }

    pub fn bits(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v >= 0.5).collect()
    }

    pub fn count_positive(&self) -> usize {
        self.data.iter().filter(|&&v| v >= 0.5).count()
    }

    /// Pixel-wise maximum with another mask of the same size.
    pub fn max_with(&mut self, other: &Mask) -> Result<()> {
        if other.size() != self.size() {
            return Err(invalid_argument(format!(
                "mask size {:?} does not match {:?}",
                other.size(),
                self.size()
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = a.max(b);
        }
        self.binary = self.binary && other.binary;
        Ok(())
    }

    /// Loads an 8-bit (or lower depth) grayscale PNG; values above 127 are tampered.
    pub fn load_binary(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        let bits: Vec<bool> = img.as_raw().iter().map(|&v| v > 127).collect();
        Ok(Self::from_bools(h as usize, w as usize, &bits))
    }

    pub fn to_gray8(&self) -> GrayImage {
        let raw = self.data.iter().map(|v| (v * 255.0).round() as u8).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size matches")
    }

    /// Writes an 8-bit PNG: 255 = tampered, 0 = pristine for binary masks, a
    /// linear ramp otherwise.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_gray8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

/// One of the four quantized orientations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Rotation {
    #[serde(rename = "0")]
    R0,
    #[serde(rename = "90")]
    R90,
    #[serde(rename = "180")]
    R180,
    #[serde(rename = "270")]
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn quarter_turns(self) -> usize {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 1,
            Rotation::R180 => 2,
            Rotation::R270 => 3,
        }
    }

    pub fn from_quarter_turns(turns: i64) -> Self {
        Self::ALL[turns.rem_euclid(4) as usize]
    }

    pub fn degrees(self) -> u32 {
        self.quarter_turns() as u32 * 90
    }

    pub fn radians(self) -> f64 {
        self.quarter_turns() as f64 * std::f64::consts::FRAC_PI_2
    }

    /// Accepts any multiple of 90 degrees, negative values included.
    pub fn from_degrees(degrees: i64) -> Result<Self> {
        if degrees % 90 != 0 {
            return Err(invalid_argument(format!(
                "rotation of {degrees} degrees is not a multiple of 90"
            )));
        }
        Ok(Self::from_quarter_turns(degrees / 90))
    }

    pub fn inverse(self) -> Self {
        Self::from_quarter_turns(-(self.quarter_turns() as i64))
    }
}

impl std::fmt::Display for Rotation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.degrees())
    }
}

/// Zoom-patch quadrant of the 2x enlarged frame, numbered 1..=4 row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] =
        [Quadrant::TopLeft, Quadrant::TopRight, Quadrant::BottomLeft, Quadrant::BottomRight];

    pub fn index(self) -> usize {
        match self {
            Quadrant::TopLeft => 1,
            Quadrant::TopRight => 2,
            Quadrant::BottomLeft => 3,
            Quadrant::BottomRight => 4,
        }
    }

    pub fn from_index(r: usize) -> Result<Self> {
        match r {
            1..=4 => Ok(Self::ALL[r - 1]),
            _ => Err(invalid_argument(format!("patch index {r} outside 1..=4"))),
        }
    }

    /// Top-left corner of the patch inside an enlarged frame whose patches are
    /// `patch` pixels wide.
    pub fn origin(self, patch: usize) -> (usize, usize) {
        let r = self.index() - 1;
        ((r / 2) * patch, (r % 2) * patch)
    }
}

/// How an augmented frame relates to the base frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GeomTransform {
    Rotation(Rotation),
    ZoomPatch(Quadrant),
}

impl GeomTransform {
    pub const IDENTITY: GeomTransform = GeomTransform::Rotation(Rotation::R0);

    /// The rotation whose classifier decodes this frame; zoom patches use the
    /// upright detector.
    pub fn direction(self) -> Rotation {
        match self {
            GeomTransform::Rotation(r) => r,
            GeomTransform::ZoomPatch(_) => Rotation::R0,
        }
    }
}

impl std::fmt::Display for GeomTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GeomTransform::Rotation(r) => write!(f, "rot{r}"),
            GeomTransform::ZoomPatch(q) => write!(f, "patch{}", q.index()),
        }
    }
}

/// A query resampled to the fiducial size, remembering where it came from.
#[derive(Clone, Debug)]
pub struct Canonical {
    pub image: Image,
    pub original_size: (usize, usize),
}

pub fn canonicalize(img: &Image) -> Result<Canonical> {
    let original_size = img.size();
    let image = if original_size == (FIDUCIAL_SIZE, FIDUCIAL_SIZE) {
        img.clone()
    } else {
        resize_bilinear(img, FIDUCIAL_SIZE, FIDUCIAL_SIZE)?
    };
    Ok(Canonical { image, original_size })
}

/// Source coordinate of destination index `i` under corner-aligned sampling.
fn source_coord(i: usize, dst: usize, src: usize) -> f32 {
    if dst <= 1 {
        (src as f32 - 1.0) / 2.0
    } else {
        i as f32 * (src - 1) as f32 / (dst - 1) as f32
    }
}

struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    t: Vec<f32>,
}

fn taps(dst: usize, src: usize) -> Taps {
    let mut lo = Vec::with_capacity(dst);
    let mut hi = Vec::with_capacity(dst);
    let mut t = Vec::with_capacity(dst);
    for i in 0..dst {
        let x = source_coord(i, dst, src);
        let x0 = (x.floor() as usize).min(src - 1);
        lo.push(x0);
        hi.push((x0 + 1).min(src - 1));
        t.push(x - x0 as f32);
    }
    Taps { lo, hi, t }
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    a + (b - a) * t
}

/// Bilinear resampling of an interleaved plane with `channels` values per pixel.
pub(crate) fn resize_plane(
    data: &[f32],
    src_h: usize,
    src_w: usize,
    channels: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<f32> {
    let ty = taps(dst_h, src_h);
    let tx = taps(dst_w, src_w);
    let mut out = vec![0.0; dst_h * dst_w * channels];
    for r in 0..dst_h {
        let (r0, r1, fy) = (ty.lo[r], ty.hi[r], ty.t[r]);
        for c in 0..dst_w {
            let (c0, c1, fx) = (tx.lo[c], tx.hi[c], tx.t[c]);
            for k in 0..channels {
                let at = |y: usize, x: usize| data[(y * src_w + x) * channels + k];
                let top = lerp(at(r0, c0), at(r0, c1), fx);
                let bottom = lerp(at(r1, c0), at(r1, c1), fx);
                out[(r * dst_w + c) * channels + k] = lerp(top, bottom, fy);
            }
        }
    }
    out
}

pub fn resize_bilinear(img: &Image, height: usize, width: usize) -> Result<Image> {
    if height == 0 || width == 0 {
        return Err(invalid_argument("target size must be positive"));
    }
    let data = resize_plane(&img.data, img.height, img.width, 3, height, width);
    Ok(Image { height, width, data })
}

pub fn resize_mask_bilinear(mask: &Mask, height: usize, width: usize) -> Result<Mask> {
    if height == 0 || width == 0 {
        return Err(invalid_argument("target size must be positive"));
    }
    if mask.size() == (height, width) {
        return Ok(mask.clone());
    }
    let data = resize_plane(&mask.data, mask.height, mask.width, 1, height, width);
    Ok(Mask { height, width, data, binary: false })
}

/// Nearest-neighbour resampling; keeps binary masks binary.
pub fn resize_mask_nearest(mask: &Mask, height: usize, width: usize) -> Result<Mask> {
    if height == 0 || width == 0 {
        return Err(invalid_argument("target size must be positive"));
    }
    let pick = |i: usize, dst: usize, src: usize| ((i * src + src / 2) / dst).min(src - 1);
    let mut data = Vec::with_capacity(height * width);
    for r in 0..height {
        let sr = pick(r, height, mask.height);
        for c in 0..width {
            data.push(mask.data[sr * mask.width + pick(c, width, mask.width)]);
        }
    }
    Ok(Mask { height, width, data, binary: mask.binary })
}

/// Rotates a square interleaved plane counterclockwise by `turns` quarter turns.
/// Pure index permutation.
pub(crate) fn rotate_plane<T: Copy>(data: &[T], n: usize, channels: usize, turns: usize) -> Vec<T> {
    let turns = turns % 4;
    if turns == 0 {
        return data.to_vec();
    }
    let mut out = Vec::with_capacity(data.len());
    for r in 0..n {
        for c in 0..n {
            let (sr, sc) = match turns {
                1 => (c, n - 1 - r),
                2 => (n - 1 - r, n - 1 - c),
                _ => (n - 1 - c, r),
            };
            let s = (sr * n + sc) * channels;
            out.extend_from_slice(&data[s..s + channels]);
        }
    }
    out
}

pub fn rotate_quantized(img: &Image, rotation: Rotation) -> Result<Image> {
    if img.height != img.width {
        return Err(invalid_input(format!(
            "quantized rotation needs a square image, got {}x{}",
            img.height, img.width
        )));
    }
    let data = rotate_plane(&img.data, img.height, 3, rotation.quarter_turns());
    Ok(Image { height: img.height, width: img.width, data })
}

/// Degree-valued entry point: rejects angles outside the quantized set.
pub fn rotate_degrees(img: &Image, degrees: i64) -> Result<Image> {
    rotate_quantized(img, Rotation::from_degrees(degrees)?)
}

pub fn rotate_mask(mask: &Mask, rotation: Rotation) -> Result<Mask> {
    if mask.height != mask.width {
        return Err(invalid_input("quantized rotation needs a square mask"));
    }
    let data = rotate_plane(&mask.data, mask.height, 1, rotation.quarter_turns());
    Ok(Mask { height: mask.height, width: mask.width, data, binary: mask.binary })
}

fn crop_plane(
    data: &[f32],
    width: usize,
    channels: usize,
    origin: (usize, usize),
    size: usize,
) -> Vec<f32> {
    let mut out = Vec::with_capacity(size * size * channels);
    for r in origin.0..origin.0 + size {
        let start = (r * width + origin.1) * channels;
        out.extend_from_slice(&data[start..start + size * channels]);
    }
    out
}

/// Enlarges a fiducial image 2x and slices the four quadrant patches.
pub fn zoom_patches(img: &Image) -> Result<Vec<(Image, GeomTransform)>> {
    if img.size() != (FIDUCIAL_SIZE, FIDUCIAL_SIZE) {
        return Err(invalid_input(format!(
            "zoom patches need a {FIDUCIAL_SIZE}x{FIDUCIAL_SIZE} image, got {}x{}",
            img.height, img.width
        )));
    }
    let n = FIDUCIAL_SIZE;
    let enlarged = resize_plane(&img.data, n, n, 3, 2 * n, 2 * n);
    Ok(Quadrant::ALL
        .iter()
        .map(|&q| {
            let data = crop_plane(&enlarged, 2 * n, 3, q.origin(n), n);
            (Image { height: n, width: n, data }, GeomTransform::ZoomPatch(q))
        })
        .collect())
}

/// The quadrant crop of the 2x-enlarged mask: ground truth in a patch frame.
pub fn zoom_patch_mask(mask: &Mask, quadrant: Quadrant) -> Result<Mask> {
    let n = mask.height;
    if mask.width != n {
        return Err(invalid_input("zoom patches need a square mask"));
    }
    let enlarged = resize_plane(&mask.data, n, n, 1, 2 * n, 2 * n);
    let data = crop_plane(&enlarged, 2 * n, 1, quadrant.origin(n), n);
    let binary = mask.binary && data.iter().all(|&v| v == 0.0 || v == 1.0);
    Ok(Mask { height: n, width: n, data, binary })
}

/// Maps a mask painted in a transformed frame back into the base frame.
///
/// Rotations are undone exactly. Zoom-patch masks are halved by 2x2 averaging
/// and pasted at the quadrant's base-frame location, zeros elsewhere.
pub fn map_mask_back(mask: &Mask, transform: GeomTransform, base_size: usize) -> Result<Mask> {
    if mask.size() != (base_size, base_size) {
        return Err(invalid_argument(format!(
            "mask is {}x{} but the {transform} frame is {base_size}x{base_size}",
            mask.height, mask.width
        )));
    }
    match transform {
        GeomTransform::Rotation(r) => rotate_mask(mask, r.inverse()),
        GeomTransform::ZoomPatch(q) => {
            if base_size % 2 != 0 {
                return Err(invalid_argument("zoom-patch frames need an even base size"));
            }
            let half = base_size / 2;
            let (oy, ox) = q.origin(half);
            let mut out = Mask::zeros(base_size, base_size);
            let mut binary = mask.binary;
            for r in 0..half {
                for c in 0..half {
                    let at = |y: usize, x: usize| mask.data[y * base_size + x];
                    let v = 0.25
                        * (at(2 * r, 2 * c)
                            + at(2 * r, 2 * c + 1)
                            + at(2 * r + 1, 2 * c)
                            + at(2 * r + 1, 2 * c + 1));
                    if v != 0.0 && v != 1.0 {
                        binary = false;
                    }
                    out.data[(oy + r) * base_size + ox + c] = v;
                }
            }
            out.binary = binary;
            Ok(out)
        }
    }
}

/// Red-tinted overlay of a binary mask over the image, for inspection.
pub fn overlay(img: &Image, mask: &Mask) -> Result<RgbImage> {
    if img.size() != mask.size() {
        return Err(invalid_argument("overlay needs matching image and mask sizes"));
    }
    let mut out = img.to_rgb8();
    for (x, y, px) in out.enumerate_pixels_mut() {
        if mask.get(y as usize, x as usize) >= 0.5 {
            let Rgb([r, g, b]) = *px;
            *px = Rgb([r / 2 + 127, g / 2, b / 2]);
        }
    }
    Ok(out)
}

/// Grayscale PNG helper for arbitrary `[0, 1]` planes.
pub fn save_gray_plane(data: &[f32], height: usize, width: usize, path: impl AsRef<Path>) -> Result<()> {
    let mut img = GrayImage::new(width as u32, height as u32);
    for (i, v) in data.iter().enumerate() {
        img.put_pixel((i % width) as u32, (i / width) as u32, Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8]));
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Image {
        Image::from_fn(h, w, |r, c| {
            [(r * w + c) as f32 / (h * w) as f32, r as f32 / h as f32, c as f32 / w as f32]
        })
    }

    #[test]
    fn canonicalize_sizes() {
        let big = ramp(512, 512);
        let c = canonicalize(&big).unwrap();
        assert_eq!(c.image.size(), (256, 256));
        assert_eq!(c.original_size, (512, 512));

        let same = ramp(256, 256);
        assert_eq!(canonicalize(&same).unwrap().image, same);

        let constant = Image::filled(100, 300, [0.3, 0.6, 0.9]);
        let c = canonicalize(&constant).unwrap();
        assert_eq!(c.image.size(), (256, 256));
        assert!(c.image.data().chunks(3).all(|p| p == [0.3, 0.6, 0.9]));
    }

    #[test]
    fn zero_sized_image_rejected() {
        assert!(matches!(Image::new(0, 5, vec![]), Err(crate::Error::InvalidInput(_))));
    }

    #[test]
    fn quarter_turn_orientation_on_toy_grid() {
        // 3x3 grid labelled row-major 0..9; counterclockwise quarter turn:
        // 2 5 8 / 1 4 7 / 0 3 6
        let grid: Vec<u8> = (0..9).collect();
        assert_eq!(rotate_plane(&grid, 3, 1, 1), vec![2, 5, 8, 1, 4, 7, 0, 3, 6]);
        assert_eq!(rotate_plane(&grid, 3, 1, 2), vec![8, 7, 6, 5, 4, 3, 2, 1, 0]);
        assert_eq!(rotate_plane(&grid, 3, 1, 3), vec![6, 3, 0, 7, 4, 1, 8, 5, 2]);
    }

    #[test]
    fn top_left_lands_bottom_left_under_quarter_turn() {
        let mut img = Image::filled(256, 256, [0.0; 3]);
        img.set_pixel(0, 0, [1.0, 0.5, 0.25]);
        let rot = rotate_quantized(&img, Rotation::R90).unwrap();
        assert_eq!(rot.pixel(255, 0), [1.0, 0.5, 0.25]);
        assert_eq!(rot.pixel(0, 0), [0.0; 3]);
    }

    #[test]
    fn rotation_group_closure() {
        let img = ramp(16, 16);
        assert_eq!(rotate_quantized(&img, Rotation::R0).unwrap(), img);
        let mut x = img.clone();
        for _ in 0..4 {
            x = rotate_quantized(&x, Rotation::R90).unwrap();
        }
        assert_eq!(x, img);
    }

    #[test]
    fn rotation_rejects_bad_inputs() {
        assert!(matches!(rotate_quantized(&ramp(4, 5), Rotation::R90), Err(crate::Error::InvalidInput(_))));
        assert!(matches!(rotate_degrees(&ramp(4, 4), 45), Err(crate::Error::InvalidArgument(_))));
        assert_eq!(rotate_degrees(&ramp(4, 4), -90).unwrap(), rotate_quantized(&ramp(4, 4), Rotation::R270).unwrap());
    }

    #[test]
    fn zoom_patch_origins_and_tiling() {
        let origins: Vec<_> = Quadrant::ALL.iter().map(|q| q.origin(256)).collect();
        assert_eq!(origins, vec![(0, 0), (0, 256), (256, 0), (256, 256)]);
        let mut cover = vec![0u8; 512 * 512];
        for q in Quadrant::ALL {
            let (oy, ox) = q.origin(256);
            for r in oy..oy + 256 {
                for c in ox..ox + 256 {
                    cover[r * 512 + c] += 1;
                }
            }
        }
        assert!(cover.iter().all(|&k| k == 1));
    }

    #[test]
    fn zoom_patches_of_constant_image() {
        let img = Image::filled(256, 256, [0.2, 0.4, 0.8]);
        let patches = zoom_patches(&img).unwrap();
        assert_eq!(patches.len(), 4);
        for (p, _) in &patches {
            assert_eq!(p.size(), (256, 256));
            assert!(p.data().chunks(3).all(|px| px == [0.2, 0.4, 0.8]));
        }
        assert!(zoom_patches(&ramp(128, 128)).is_err());
    }

    #[test]
    fn map_back_identity_and_rotation() {
        let mut m = Mask::zeros(8, 8);
        m.set(1, 2, 1.0);
        m.set(5, 7, 0.5);
        assert_eq!(map_mask_back(&m, GeomTransform::IDENTITY, 8).unwrap(), m);
        let rotated = rotate_mask(&m, Rotation::R90).unwrap();
        assert_eq!(map_mask_back(&rotated, GeomTransform::Rotation(Rotation::R90), 8).unwrap(), m);
    }

    #[test]
    fn full_patch_maps_to_its_quadrant() {
        let ones = Mask::ones(256, 256);
        let back = map_mask_back(&ones, GeomTransform::ZoomPatch(Quadrant::TopLeft), 256).unwrap();
        for r in 0..256 {
            for c in 0..256 {
                let expect = if r < 128 && c < 128 { 1.0 } else { 0.0 };
                assert_eq!(back.get(r, c), expect, "({r},{c})");
            }
        }
        assert!(back.is_binary());
        let back = map_mask_back(&ones, GeomTransform::ZoomPatch(Quadrant::BottomRight), 256).unwrap();
        assert_eq!(back.get(128, 128), 1.0);
        assert_eq!(back.get(127, 255), 0.0);
    }

    #[test]
    fn map_back_size_mismatch() {
        let m = Mask::zeros(8, 8);
        assert!(matches!(
            map_mask_back(&m, GeomTransform::IDENTITY, 16),
            Err(crate::Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn nearest_resize_keeps_binary() {
        let mut m = Mask::zeros(4, 4);
        m.set(0, 0, 1.0);
        let up = resize_mask_nearest(&m, 8, 8).unwrap();
        assert!(up.is_binary());
        assert_eq!(up.count_positive(), 4);
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mut m = Mask::zeros(5, 7);
        m.set(2, 3, 1.0);
        m.save_png(&path).unwrap();
        assert_eq!(Mask::load_binary(&path).unwrap(), m);
    }
}
