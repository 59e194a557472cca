//! Dense cosine affinity between two feature grids, viewed either as a
//! `G^2 x G^2` matrix or as a `G x G` grid of 2-D similarity maps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::FeatureMap;
use crate::error::{invalid_argument, Error, Result};
use crate::nn::{gemm, MatRef};

/// Normalizing constant dividing the affinity; with unit-norm cells, 1 keeps
/// entries as cosine similarities.
pub const DEFAULT_SCALE: f32 = 1.0;

/// Row-major `cells x cells` affinity; entry `(a, b)` compares cell `a` of the
/// first map with cell `b` of the second, cells flattened as `j + i * G`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    grid: usize,
    data: Vec<f32>,
}

impl SimilarityMatrix {
    pub fn from_raw(grid: usize, data: Vec<f32>) -> Result<Self> {
        let n = grid * grid;
        if data.len() != n * n {
            return Err(invalid_argument(format!(
                "a {grid}x{grid} grid needs a {n}x{n} matrix, got {} values",
                data.len()
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, a: usize, b: usize) -> f32 {
        self.data[a * self.cells() + b]
    }

    pub fn transpose(&self) -> SimilarityMatrix {
        let n = self.cells();
        let mut data = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                data[b * n + a] = self.data[a * n + b];
            }
        }
        SimilarityMatrix { grid: self.grid, data }
    }
}

pub fn similarity_matrix(fa: &FeatureMap, fb: &FeatureMap, scale: f32) -> Result<SimilarityMatrix> {
    if fa.grid() != fb.grid() || fa.dim() != fb.dim() {
        return Err(invalid_argument(format!(
            "feature maps differ in shape: {}x{}x{} vs {}x{}x{}",
            fa.grid(),
            fa.grid(),
            fa.dim(),
            fb.grid(),
            fb.grid(),
            fb.dim()
        )));
    }
    if !fa.is_normalized() || !fb.is_normalized() {
        return Err(Error::InvalidState("similarity needs normalized feature maps".into()));
    }
    if !(scale > 0.0) {
        return Err(invalid_argument("normalizing constant must be positive"));
    }
    let (n, d) = (fa.cells(), fa.dim());
    let mut data = vec![0.0f32; n * n];
    gemm(
        1.0 / scale,
        MatRef::new(fa.data(), n, d),
        MatRef::new(fb.data(), n, d).t(),
        0.0,
        &mut data,
        n,
    );
    if fa.data() == fb.data() {
        // Mirror the upper triangle so a self-pair is symmetric bit for bit.
        for a in 0..n {
            for b in 0..a {
                data[a * n + b] = data[b * n + a];
            }
        }
    }
    Ok(SimilarityMatrix { grid: fa.grid(), data })
}

/// Which operand's cells own the maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    /// Maps of the first operand's cells, spanning the second operand's grid.
    Rows,
    /// Maps of the second operand's cells, spanning the first operand's grid.
    Cols,
}

/// `G x G` grid of `G x G` similarity maps; the map of cell `(i, j)` lives at
/// `maps[(j + i * G) * G^2..][..G^2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTensor {
    grid: usize,
    maps: Vec<f32>,
    side: Side,
}

impl SimilarityTensor {
    pub fn from_maps(grid: usize, maps: Vec<f32>, side: Side) -> Result<Self> {
        let n = grid * grid;
        if maps.len() != n * n {
            return Err(invalid_argument("map buffer does not match the grid"));
        }
        Ok(Self { grid, maps, side })
    }

    pub fn zeros(grid: usize) -> Self {
        let n = grid * grid;
        Self { grid, maps: vec![0.0; n * n], side: Side::Rows }
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn maps(&self) -> &[f32] {
        &self.maps
    }

    pub fn map(&self, i: usize, j: usize) -> &[f32] {
        let n = self.grid * self.grid;
        &self.maps[(j + i * self.grid) * n..][..n]
    }

    /// Writes the 9-channel neighbourhood stack of `(i, j)` into `out`.
    /// Neighbours are visited row-major over offsets `{-1, 0, 1}^2`; those
    /// outside the grid contribute zero maps.
    pub fn write_stack(&self, i: usize, j: usize, out: &mut [f32]) -> Result<()> {
        let g = self.grid;
        if i >= g || j >= g {
            return Err(invalid_argument(format!("cell ({i}, {j}) outside a {g}x{g} grid")));
        }
        let n = g * g;
        assert_eq!(out.len(), 9 * n);
        for (k, chunk) in out.chunks_mut(n).enumerate() {
            let (ni, nj) = (i as isize + k as isize / 3 - 1, j as isize + k as isize % 3 - 1);
            if ni < 0 || nj < 0 || ni >= g as isize || nj >= g as isize {
                chunk.iter_mut().for_each(|v| *v = 0.0);
            } else {
                chunk.copy_from_slice(self.map(ni as usize, nj as usize));
            }
        }
        Ok(())
    }
}

pub fn reshape_to_maps(matrix: &SimilarityMatrix, side: Side) -> SimilarityTensor {
    let maps = match side {
        Side::Rows => matrix.data.clone(),
        Side::Cols => matrix.transpose().data,
    };
    SimilarityTensor { grid: matrix.grid, maps, side }
}

/// The 9 maps around `(i, j)` as one `9 x G x G` buffer; the centre map is channel 4.
pub fn neighborhood_stack(s: &SimilarityTensor, i: usize, j: usize) -> Result<Vec<f32>> {
    let mut out = vec![0.0; 9 * s.grid * s.grid];
    s.write_stack(i, j, &mut out)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeakStats {
    pub self_peak: f32,
    /// Largest value at Chebyshev distance > 1 from the owning cell; `None`
    /// when the grid has no such cell.
    pub best_nonlocal_peak: Option<f32>,
    pub best_nonlocal_pos: Option<(usize, usize)>,
}

pub fn peak_statistics(map: &[f32], grid: usize, self_pos: (usize, usize)) -> PeakStats {
    let (si, sj) = self_pos;
    let mut best: Option<(f32, (usize, usize))> = None;
    for i in 0..grid {
        for j in 0..grid {
            if i.abs_diff(si) <= 1 && j.abs_diff(sj) <= 1 {
                continue;
            }
            let v = map[i * grid + j];
            if best.map_or(true, |(b, _)| v > b) {
                best = Some((v, (i, j)));
            }
        }
    }
    PeakStats {
        self_peak: map[si * grid + sj],
        best_nonlocal_peak: best.map(|b| b.0),
        best_nonlocal_pos: best.map(|b| b.1),
    }
}

/// Writes every map of the tensor as one mosaic PNG, `[-1, 1]` mapped to black..white.
pub fn save_map_mosaic(s: &SimilarityTensor, path: impl AsRef<Path>) -> Result<()> {
    let g = s.grid;
    let side = g * g;
    let mut plane = vec![0.0f32; side * side];
    for i in 0..g {
        for j in 0..g {
            let m = s.map(i, j);
            for y in 0..g {
                for x in 0..g {
                    plane[(i * g + y) * side + j * g + x] = (m[y * g + x] + 1.0) * 0.5;
                }
            }
        }
    }
    crate::imaging::save_gray_plane(&plane, side, side, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmap(grid: usize, dim: usize, cells: &[&[f32]]) -> FeatureMap {
        FeatureMap::new(grid, dim, cells.concat()).unwrap().normalize()
    }

    #[test]
    fn orthonormal_self_pair_is_identity() {
        let f = fmap(2, 4, &[&[1., 0., 0., 0.], &[0., 1., 0., 0.], &[0., 0., 1., 0.], &[0., 0., 0., 1.]]);
        let s = similarity_matrix(&f, &f, 1.0).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(s.get(a, b), if a == b { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn column_pattern_matches_nested_loops() {
        let fa = fmap(2, 2, &[&[1., 0.], &[0., 1.], &[1., 0.], &[0., 1.]]);
        let fb = fmap(2, 2, &[&[1., 0.], &[1., 0.], &[1., 0.], &[1., 0.]]);
        let s = similarity_matrix(&fa, &fb, 1.0).unwrap();
        let expect_rows = [1.0, 0.0, 1.0, 0.0];
        for a in 0..4 {
            for b in 0..4 {
                let brute: f32 = (0..2).map(|d| fa.data()[a * 2 + d] * fb.data()[b * 2 + d]).sum();
                assert_eq!(s.get(a, b), brute);
                assert_eq!(s.get(a, b), expect_rows[a]);
            }
        }
    }

    #[test]
    fn rejects_mismatch_and_unnormalized() {
        let a = fmap(2, 2, &[&[1.0f32, 0.0][..]; 4]);
        let b = fmap(2, 3, &[&[1.0f32, 0.0, 0.0][..]; 4]);
        assert!(matches!(similarity_matrix(&a, &b, 1.0), Err(Error::InvalidArgument(_))));
        let raw = FeatureMap::new(2, 2, vec![1.0; 8]).unwrap();
        assert!(matches!(similarity_matrix(&raw, &raw, 1.0), Err(Error::InvalidState(_))));
    }

    #[test]
    fn single_entry_lands_at_index_arithmetic_position() {
        let mut data = vec![0.0; 16];
        data[3] = 1.0; // row 0, col 3
        let m = SimilarityMatrix::from_raw(2, data).unwrap();
        let t = reshape_to_maps(&m, Side::Rows);
        assert_eq!(t.map(0, 0), &[0.0, 0.0, 0.0, 1.0]); // grid position (1, 1)
        let cols = reshape_to_maps(&m, Side::Cols);
        assert_eq!(cols.map(1, 1), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rows_side_equals_cols_side_of_transpose() {
        let data: Vec<f32> = (0..81).map(|v| (v as f32 * 0.37).sin()).collect();
        let m = SimilarityMatrix::from_raw(3, data).unwrap();
        assert_eq!(reshape_to_maps(&m, Side::Rows).maps(), reshape_to_maps(&m.transpose(), Side::Cols).maps());
    }

    #[test]
    fn identity_maps_are_one_hot() {
        let n = 16;
        let mut data = vec![0.0; n * n];
        (0..n).for_each(|a| data[a * n + a] = 1.0);
        let t = reshape_to_maps(&SimilarityMatrix::from_raw(4, data).unwrap(), Side::Rows);
        for i in 0..4 {
            for j in 0..4 {
                let m = t.map(i, j);
                assert_eq!(m.iter().sum::<f32>(), 1.0);
                assert_eq!(m[i * 4 + j], 1.0);
            }
        }
    }

    #[test]
    fn neighbourhood_border_policy() {
        let data: Vec<f32> = (0..256).map(|v| 1.0 + v as f32).collect();
        let t = SimilarityTensor::from_maps(4, data, Side::Rows).unwrap();
        let corner = neighborhood_stack(&t, 0, 0).unwrap();
        let genuine = corner.chunks(16).filter(|c| c.iter().any(|&v| v != 0.0)).count();
        assert_eq!(genuine, 4);
        let interior = neighborhood_stack(&t, 1, 2).unwrap();
        assert!(interior.chunks(16).all(|c| c.iter().all(|&v| v != 0.0)));
        assert_eq!(&interior[4 * 16..5 * 16], t.map(1, 2));
        assert_eq!(&interior[0..16], t.map(0, 1));
        assert!(matches!(neighborhood_stack(&t, 4, 0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn peak_statistics_cases() {
        let mut m = vec![0.0; 64];
        m[2 * 8 + 3] = 1.0;
        let p = peak_statistics(&m, 8, (2, 3));
        assert_eq!(p.self_peak, 1.0);
        assert_eq!(p.best_nonlocal_peak, Some(0.0));
        m[7 * 8 + 7] = 0.9;
        m[3 * 8 + 4] = 0.95; // adjacent: ignored
        let p = peak_statistics(&m, 8, (2, 3));
        assert_eq!(p.best_nonlocal_peak, Some(0.9));
        assert_eq!(p.best_nonlocal_pos, Some((7, 7)));
    }
}
