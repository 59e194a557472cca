//! Minimal CPU layers with hand-written backward passes.
//!
//! Activations are stored channel-major, `(C, N, H, W)`, so a 3x3 convolution
//! over a whole batch is a single wide GEMM against an im2col buffer. The
//! layers are generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference checks.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rand::Rng;

use crate::error::{invalid_argument, Result};

/// Floating-point scalar with a GEMM kernel.
pub trait Real:
    Float + FromPrimitive + Default + Debug + Sum + Send + Sync + std::ops::AddAssign + 'static
{
    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// Pointers must be valid for the extents implied by `m, k, n` and strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Strided view of a row-major matrix buffer.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }

    fn extent(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c = alpha * a * b + beta * c`, where `c` is `a.rows x b.cols` with row stride `rsc`.
pub(crate) fn gemm<T: Real>(alpha: T, a: MatRef<T>, b: MatRef<T>, beta: T, c: &mut [T], rsc: usize) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert!(a.extent() <= a.data.len() && b.extent() <= b.data.len());
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * rsc + n <= c.len(), "output buffer too small");
    // SAFETY: extents checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

/// A batch of feature planes in `(C, N, H, W)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub channels: usize,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> Batch<T> {
    pub fn zeros(channels: usize, count: usize, height: usize, width: usize) -> Self {
        Self { channels, count, height, width, data: vec![T::zero(); channels * count * height * width] }
    }

    /// Builds a batch from samples laid out `(N, C, H, W)`.
    pub fn from_nchw(count: usize, channels: usize, height: usize, width: usize, nchw: &[T]) -> Self {
        assert_eq!(nchw.len(), count * channels * height * width);
        let plane = height * width;
        let mut data = vec![T::zero(); nchw.len()];
        for n in 0..count {
            for c in 0..channels {
                let src = (n * channels + c) * plane;
                let dst = (c * count + n) * plane;
                data[dst..dst + plane].copy_from_slice(&nchw[src..src + plane]);
            }
        }
        Self { channels, count, height, width, data }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Columns per channel row, i.e. `N * H * W`.
    pub fn row_len(&self) -> usize {
        self.count * self.plane()
    }
}

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}

fn uniform_init<T: Real, R: Rng>(rng: &mut R, len: usize, fan_in: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..len).map(|_| T::lit(rng.gen_range(-bound..bound))).collect()
}

/// Upper bound on im2col buffer elements; at least one sample is always taken.
const IM2COL_BUDGET: usize = 1 << 23;
/// Inference switches to row bands when one sample's im2col exceeds this.
const BAND_BUDGET: usize = 1 << 20;

fn im2col_chunk(k: usize, plane: usize, count: usize) -> usize {
    (IM2COL_BUDGET / (k * plane).max(1)).clamp(1, count.max(1))
}

/// 3x3 convolution, stride 1, zero padding 1.
#[derive(Clone, Debug)]
pub struct Conv3x3<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `out_channels x (in_channels * 9)`, PyTorch ordering.
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    input: Option<Batch<T>>,
}

fn im2col<T: Real>(x: &Batch<T>, n0: usize, n1: usize, col: &mut [T]) {
    let (h, w) = (x.height, x.width);
    let plane = h * w;
    let cols = (n1 - n0) * plane;
    for ci in 0..x.channels {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * cols..][..cols];
                for n in n0..n1 {
                    let src = &x.data[(ci * x.count + n) * plane..][..plane];
                    let dst = &mut row[(n - n0) * plane..][..plane];
                    for y in 0..h {
                        let out_row = &mut dst[y * w..(y + 1) * w];
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            out_row.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let in_row = &src[sy as usize * w..(sy as usize + 1) * w];
                        match kx {
                            0 => {
                                out_row[0] = T::zero();
                                out_row[1..].copy_from_slice(&in_row[..w - 1]);
                            }
                            1 => out_row.copy_from_slice(in_row),
                            _ => {
                                out_row[..w - 1].copy_from_slice(&in_row[1..]);
                                out_row[w - 1] = T::zero();
                            }
                        }
                    }
                }
            }
        }
    }
}

/// im2col for rows `[y0, y1)` of sample `n`.
fn im2col_band<T: Real>(x: &Batch<T>, n: usize, y0: usize, y1: usize, col: &mut [T]) {
    let (h, w) = (x.height, x.width);
    let plane = h * w;
    let cols = (y1 - y0) * w;
    for ci in 0..x.channels {
        let src = &x.data[(ci * x.count + n) * plane..][..plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[(ci * 9 + ky * 3 + kx) * cols..][..cols];
                for y in y0..y1 {
                    let out_row = &mut row[(y - y0) * w..][..w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let in_row = &src[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            out_row[0] = T::zero();
                            out_row[1..].copy_from_slice(&in_row[..w - 1]);
                        }
                        1 => out_row.copy_from_slice(in_row),
                        _ => {
                            out_row[..w - 1].copy_from_slice(&in_row[1..]);
                            out_row[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], dx: &mut Batch<T>, n0: usize, n1: usize) {
    let (h, w) = (dx.height, dx.width);
    let plane = h * w;
    let cols = (n1 - n0) * plane;
    let count = dx.count;
    for ci in 0..dx.channels {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[(ci * 9 + ky * 3 + kx) * cols..][..cols];
                for n in n0..n1 {
                    let src = &row[(n - n0) * plane..][..plane];
                    let dst = &mut dx.data[(ci * count + n) * plane..][..plane];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let g = &src[y * w..(y + 1) * w];
                        let d = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                        match kx {
                            0 => d[..w - 1].iter_mut().zip(&g[1..]).for_each(|(a, &b)| *a += b),
                            1 => d.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
                            _ => d[1..].iter_mut().zip(&g[..w - 1]).for_each(|(a, &b)| *a += b),
                        }
                    }
                }
            }
        }
    }
}

/// Copies plane `(c, n)` into a zero-bordered `(h + 2) x (w + 2)` buffer.
fn pad_plane<T: Real>(x: &Batch<T>, c: usize, n: usize, out: &mut [T]) {
    let (h, w) = (x.height, x.width);
    let pw = w + 2;
    out.iter_mut().for_each(|v| *v = T::zero());
    let src = &x.data[(c * x.count + n) * h * w..][..h * w];
    for y in 0..h {
        out[(y + 1) * pw + 1..][..w].copy_from_slice(&src[y * w..(y + 1) * w]);
    }
}

fn axpy<T: Real>(acc: &mut [T], a: T, x: &[T]) {
    acc.iter_mut().zip(x).for_each(|(o, &v)| *o += a * v);
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 16];
    let mut ca = a.chunks_exact(16);
    let mut cb = b.chunks_exact(16);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..16 {
            lanes[l] += x[l] * y[l];
        }
    }
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    lanes.iter().copied().sum::<T>() + tail
}

/// Layers this narrow are memory-bound under im2col; they use shifted
/// multiply-adds over zero-bordered planes instead.
fn prefers_direct(in_channels: usize, out_channels: usize, plane: usize) -> bool {
    plane >= 32 * 32 && in_channels * out_channels <= 128
}

impl<T: Real> Conv3x3<T> {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, bias: bool, rng: &mut R) -> Self {
        let fan_in = in_channels * 9;
        let weight = Param::new(uniform_init(rng, out_channels * fan_in, fan_in));
        let bias = bias.then(|| Param::new(uniform_init(rng, out_channels, fan_in)));
        Self { in_channels, out_channels, weight, bias, input: None }
    }

    pub fn from_weights(in_channels: usize, out_channels: usize, weight: Vec<T>, bias: Option<Vec<T>>) -> Result<Self> {
        if weight.len() != out_channels * in_channels * 9 {
            return Err(invalid_argument("conv weight length does not match its shape"));
        }
        if bias.as_ref().is_some_and(|b| b.len() != out_channels) {
            return Err(invalid_argument("conv bias length does not match its shape"));
        }
        Ok(Self { in_channels, out_channels, weight: Param::new(weight), bias: bias.map(Param::new), input: None })
    }

    pub fn infer(&self, x: &Batch<T>) -> Batch<T> {
        if prefers_direct(self.in_channels, self.out_channels, x.plane()) {
            self.infer_direct(x)
        } else {
            self.infer_im2col(x)
        }
    }

    fn infer_direct(&self, x: &Batch<T>) -> Batch<T> {
        assert_eq!(x.channels, self.in_channels, "conv input channel mismatch");
        let (h, w, count) = (x.height, x.width, x.count);
        let (cin, cout) = (self.in_channels, self.out_channels);
        let pw = w + 2;
        let pplane = (h + 2) * pw;
        // Output position (y, c) sits at padded offset y * pw + c + 1; the
        // border columns in between are computed and discarded.
        let span = h * pw - 2;
        let mut out = Batch::zeros(cout, count, h, w);
        let mut xp = vec![T::zero(); cin * pplane];
        let mut acc = vec![T::zero(); span];
        for n in 0..count {
            for ci in 0..cin {
                pad_plane(x, ci, n, &mut xp[ci * pplane..][..pplane]);
            }
            for co in 0..cout {
                acc.iter_mut().for_each(|v| *v = T::zero());
                for ci in 0..cin {
                    let src = &xp[ci * pplane..][..pplane];
                    let wk = &self.weight.value[(co * cin + ci) * 9..][..9];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            axpy(&mut acc, wk[ky * 3 + kx], &src[ky * pw + kx..][..span]);
                        }
                    }
                }
                let dst = &mut out.data[(co * count + n) * h * w..][..h * w];
                for y in 0..h {
                    dst[y * w..(y + 1) * w].copy_from_slice(&acc[y * pw..][..w]);
                }
            }
        }
        self.add_bias(&mut out);
        out
    }

    fn backward_direct(&mut self, x: &Batch<T>, g: &Batch<T>) -> Batch<T> {
        let (h, w, count) = (x.height, x.width, x.count);
        let (cin, cout) = (self.in_channels, self.out_channels);
        let pw = w + 2;
        let pplane = (h + 2) * pw;
        let span = h * pw - 2;
        let mut dx = Batch::zeros(cin, count, h, w);
        let mut xp = vec![T::zero(); cin * pplane];
        let mut dxp = vec![T::zero(); cin * pplane];
        let mut gp = vec![T::zero(); span];
        for n in 0..count {
            for ci in 0..cin {
                pad_plane(x, ci, n, &mut xp[ci * pplane..][..pplane]);
            }
            dxp.iter_mut().for_each(|v| *v = T::zero());
            for co in 0..cout {
                gp.iter_mut().for_each(|v| *v = T::zero());
                let src = &g.data[(co * count + n) * h * w..][..h * w];
                for y in 0..h {
                    gp[y * pw..][..w].copy_from_slice(&src[y * w..(y + 1) * w]);
                }
                for ci in 0..cin {
                    let base = (co * cin + ci) * 9;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let off = ci * pplane + ky * pw + kx;
                            self.weight.grad[base + ky * 3 + kx] += dot(&gp, &xp[off..][..span]);
                            axpy(&mut dxp[off..][..span], self.weight.value[base + ky * 3 + kx], &gp);
                        }
                    }
                }
            }
            for ci in 0..cin {
                let dst = &mut dx.data[(ci * count + n) * h * w..][..h * w];
                for y in 0..h {
                    dst[y * w..(y + 1) * w].copy_from_slice(&dxp[ci * pplane + (y + 1) * pw + 1..][..w]);
                }
            }
        }
        dx
    }

    fn infer_im2col(&self, x: &Batch<T>) -> Batch<T> {
        assert_eq!(x.channels, self.in_channels, "conv input channel mismatch");
        let mut out = Batch::zeros(self.out_channels, x.count, x.height, x.width);
        let plane = x.plane();
        let k = self.in_channels * 9;
        let row_len = out.row_len();
        let w = MatRef::new(&self.weight.value, self.out_channels, k);
        if k * plane > BAND_BUDGET {
            let band = (BAND_BUDGET / (k * x.width)).max(1);
            let mut col = vec![T::zero(); k * band * x.width];
            for n in 0..x.count {
                for y0 in (0..x.height).step_by(band) {
                    let y1 = (y0 + band).min(x.height);
                    let cols = (y1 - y0) * x.width;
                    im2col_band(x, n, y0, y1, &mut col[..k * cols]);
                    let c = &mut out.data[n * plane + y0 * x.width..];
                    gemm(T::one(), w, MatRef::new(&col[..k * cols], k, cols), T::zero(), c, row_len);
                }
            }
            self.add_bias(&mut out);
            return out;
        }
        let chunk = im2col_chunk(k, plane, x.count);
        let mut col = vec![T::zero(); k * chunk * plane];
        for n0 in (0..x.count).step_by(chunk) {
            let n1 = (n0 + chunk).min(x.count);
            let cols = (n1 - n0) * plane;
            im2col(x, n0, n1, &mut col[..k * cols]);
            gemm(T::one(), w, MatRef::new(&col[..k * cols], k, cols), T::zero(), &mut out.data[n0 * plane..], row_len);
        }
        self.add_bias(&mut out);
        out
    }

    fn add_bias(&self, out: &mut Batch<T>) {
        if let Some(b) = &self.bias {
            let row_len = out.row_len();
            for (co, row) in out.data.chunks_mut(row_len).enumerate() {
                let bv = b.value[co];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }

    pub fn forward(&mut self, x: Batch<T>) -> Batch<T> {
        let out = self.infer(&x);
        self.input = Some(x);
        out
    }

    pub fn backward(&mut self, g: &Batch<T>) -> Batch<T> {
        let x = self.input.take().expect("backward without forward");
        if let Some(b) = &mut self.bias {
            for (co, row) in g.data.chunks(g.row_len()).enumerate() {
                b.grad[co] += row.iter().copied().sum::<T>();
            }
        }
        if prefers_direct(self.in_channels, self.out_channels, x.plane()) {
            self.backward_direct(&x, g)
        } else {
            self.backward_im2col(&x, g)
        }
    }

    fn backward_im2col(&mut self, x: &Batch<T>, g: &Batch<T>) -> Batch<T> {
        let plane = x.plane();
        let k = self.in_channels * 9;
        let row_len = g.row_len();
        let mut dx = Batch::zeros(x.channels, x.count, x.height, x.width);
        let chunk = im2col_chunk(k, plane, x.count);
        let mut col = vec![T::zero(); k * chunk * plane];
        let mut dcol = vec![T::zero(); col.len()];
        for n0 in (0..x.count).step_by(chunk) {
            let n1 = (n0 + chunk).min(x.count);
            let cols = (n1 - n0) * plane;
            im2col(x, n0, n1, &mut col[..k * cols]);
            let g_chunk = MatRef { data: &g.data[n0 * plane..], rows: self.out_channels, cols, rs: row_len, cs: 1 };
            // dW += g * col^T
            gemm(T::one(), g_chunk, MatRef::new(&col[..k * cols], k, cols).t(), T::one(), &mut self.weight.grad, k);
            // dcol = W^T * g
            let w = MatRef::new(&self.weight.value, self.out_channels, k);
            gemm(T::one(), w.t(), g_chunk, T::zero(), &mut dcol[..k * cols], cols);
            col2im(&dcol[..k * cols], &mut dx, n0, n1);
        }
        dx
    }
}

/// Per-channel batch normalization.
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![T::one(); channels]),
            beta: Param::new(vec![T::zero(); channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    /// Per-channel `(scale, shift)` equivalent of inference-mode normalization.
    pub fn affine(&self) -> (Vec<T>, Vec<T>) {
        let eps = T::lit(self.eps);
        (0..self.channels())
            .map(|c| {
                let s = self.gamma.value[c] / (self.running_var[c] + eps).sqrt();
                (s, self.beta.value[c] - self.running_mean[c] * s)
            })
            .unzip()
    }

    pub fn infer(&self, mut x: Batch<T>) -> Batch<T> {
        let (scale, shift) = self.affine();
        let row_len = x.row_len();
        for (c, row) in x.data.chunks_mut(row_len).enumerate() {
            row.iter_mut().for_each(|v| *v = *v * scale[c] + shift[c]);
        }
        x
    }

    pub fn forward(&mut self, mut x: Batch<T>) -> Batch<T> {
        let row_len = x.row_len();
        let m = T::from_usize(row_len).unwrap();
        let eps = T::lit(self.eps);
        let mom = T::lit(self.momentum);
        let mut inv_stds = Vec::with_capacity(self.channels());
        for (c, row) in x.data.chunks_mut(row_len).enumerate() {
            let mean = row.iter().copied().sum::<T>() / m;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let inv_std = T::one() / (var + eps).sqrt();
            let unbiased = if row_len > 1 { var * m / (m - T::one()) } else { var };
            self.running_mean[c] = (T::one() - mom) * self.running_mean[c] + mom * mean;
            self.running_var[c] = (T::one() - mom) * self.running_var[c] + mom * unbiased;
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv_std);
            inv_stds.push(inv_std);
        }
        let xhat = x.data.clone();
        for (c, row) in x.data.chunks_mut(row_len).enumerate() {
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            row.iter_mut().for_each(|v| *v = *v * g + b);
        }
        self.cache = Some((xhat, inv_stds));
        x
    }

    pub fn backward(&mut self, mut g: Batch<T>) -> Batch<T> {
        let (xhat, inv_stds) = self.cache.take().expect("backward without forward");
        let row_len = g.row_len();
        let m = T::from_usize(row_len).unwrap();
        for (c, (grow, xrow)) in g.data.chunks_mut(row_len).zip(xhat.chunks(row_len)).enumerate() {
            let sum_g = grow.iter().copied().sum::<T>();
            let sum_gx = grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>();
            self.gamma.grad[c] += sum_gx;
            self.beta.grad[c] += sum_g;
            let k = self.gamma.value[c] * inv_stds[c] / m;
            for (gv, &xv) in grow.iter_mut().zip(xrow) {
                *gv = k * (m * *gv - sum_g - xv * sum_gx);
            }
        }
        g
    }
}

#[derive(Clone, Debug, Default)]
pub struct Relu {
    active: Option<Vec<bool>>,
}

impl Relu {
    pub fn infer<T: Real>(mut x: Batch<T>) -> Batch<T> {
        x.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
        x
    }

    pub fn forward<T: Real>(&mut self, x: Batch<T>) -> Batch<T> {
        let out = Self::infer(x);
        self.active = Some(out.data.iter().map(|&v| v > T::zero()).collect());
        out
    }

    pub fn backward<T: Real>(&mut self, mut g: Batch<T>) -> Batch<T> {
        let active = self.active.take().expect("backward without forward");
        g.data.iter_mut().zip(active).for_each(|(v, a)| if !a { *v = T::zero() });
        g
    }
}

/// 2x2 max pooling with stride 2 (odd trailing rows/columns dropped).
#[derive(Clone, Debug, Default)]
pub struct MaxPool2 {
    argmax: Option<(Vec<usize>, [usize; 4])>,
}

impl MaxPool2 {
    fn run<T: Real>(x: &Batch<T>, keep: bool) -> (Batch<T>, Vec<usize>) {
        let (oh, ow) = (x.height / 2, x.width / 2);
        let mut out = Batch::zeros(x.channels, x.count, oh, ow);
        let mut idx = if keep { Vec::with_capacity(out.data.len()) } else { Vec::new() };
        let plane = x.plane();
        for p in 0..x.channels * x.count {
            let src = &x.data[p * plane..(p + 1) * plane];
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = 2 * y * x.width + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (2 * y + dy) * x.width + 2 * xx + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    out.data[p * oh * ow + y * ow + xx] = src[best];
                    if keep {
                        idx.push(p * plane + best);
                    }
                }
            }
        }
        (out, idx)
    }

    pub fn infer<T: Real>(x: &Batch<T>) -> Batch<T> {
        Self::run(x, false).0
    }

    pub fn forward<T: Real>(&mut self, x: Batch<T>) -> Batch<T> {
        let (out, idx) = Self::run(&x, true);
        self.argmax = Some((idx, [x.channels, x.count, x.height, x.width]));
        out
    }

    pub fn backward<T: Real>(&mut self, g: &Batch<T>) -> Batch<T> {
        let (idx, [c, n, h, w]) = self.argmax.take().expect("backward without forward");
        let mut dx = Batch::zeros(c, n, h, w);
        for (&i, &gv) in idx.iter().zip(&g.data) {
            dx.data[i] += gv;
        }
        dx
    }
}

/// Spatial mean; output planes are 1x1.
#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    shape: Option<[usize; 4]>,
}

impl GlobalAvgPool {
    pub fn infer<T: Real>(x: &Batch<T>) -> Batch<T> {
        let plane = x.plane();
        let inv = T::one() / T::from_usize(plane).unwrap();
        let data = x.data.chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        Batch { channels: x.channels, count: x.count, height: 1, width: 1, data }
    }

    pub fn forward<T: Real>(&mut self, x: Batch<T>) -> Batch<T> {
        self.shape = Some([x.channels, x.count, x.height, x.width]);
        Self::infer(&x)
    }

    pub fn backward<T: Real>(&mut self, g: &Batch<T>) -> Batch<T> {
        let [c, n, h, w] = self.shape.take().expect("backward without forward");
        let inv = T::one() / T::from_usize(h * w).unwrap();
        let mut dx = Batch::zeros(c, n, h, w);
        for (p, &gv) in dx.data.chunks_mut(h * w).zip(&g.data) {
            p.iter_mut().for_each(|v| *v = gv * inv);
        }
        dx
    }
}

/// Fully connected layer over 1x1 planes: `(in, N) -> (out, N)`.
#[derive(Clone, Debug)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs x inputs`.
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Batch<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            inputs,
            outputs,
            weight: Param::new(uniform_init(rng, inputs * outputs, inputs)),
            bias: Param::new(uniform_init(rng, outputs, inputs)),
            input: None,
        }
    }

    pub fn infer(&self, x: &Batch<T>) -> Batch<T> {
        assert_eq!(x.channels * x.plane(), self.inputs, "dense input width mismatch");
        let n = x.count;
        let mut out = Batch::zeros(self.outputs, n, 1, 1);
        for (o, row) in out.data.chunks_mut(n).enumerate() {
            row.iter_mut().for_each(|v| *v = self.bias.value[o]);
        }
        gemm(
            T::one(),
            MatRef::new(&self.weight.value, self.outputs, self.inputs),
            MatRef::new(&x.data, self.inputs, n),
            T::one(),
            &mut out.data,
            n,
        );
        out
    }

    pub fn forward(&mut self, x: Batch<T>) -> Batch<T> {
        let out = self.infer(&x);
        self.input = Some(x);
        out
    }

    pub fn backward(&mut self, g: &Batch<T>) -> Batch<T> {
        let x = self.input.take().expect("backward without forward");
        let n = x.count;
        let gm = MatRef::new(&g.data, self.outputs, n);
        gemm(T::one(), gm, MatRef::new(&x.data, self.inputs, n).t(), T::one(), &mut self.weight.grad, self.inputs);
        for (o, row) in g.data.chunks(n).enumerate() {
            self.bias.grad[o] += row.iter().copied().sum::<T>();
        }
        let mut dx = Batch::zeros(x.channels, n, x.height, x.width);
        gemm(T::one(), MatRef::new(&self.weight.value, self.outputs, self.inputs).t(), gm, T::zero(), &mut dx.data, n);
        dx
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv(Conv3x3<T>),
    Norm(BatchNorm<T>),
    Relu(Relu),
    Pool(MaxPool2),
    GlobalAvg(GlobalAvgPool),
    Dense(Dense<T>),
}

impl<T: Real> Layer<T> {
    pub fn infer(&self, x: Batch<T>) -> Batch<T> {
        match self {
            Layer::Conv(l) => l.infer(&x),
            Layer::Norm(l) => l.infer(x),
            Layer::Relu(_) => Relu::infer(x),
            Layer::Pool(_) => MaxPool2::infer(&x),
            Layer::GlobalAvg(_) => GlobalAvgPool::infer(&x),
            Layer::Dense(l) => l.infer(&x),
        }
    }

    pub fn forward(&mut self, x: Batch<T>) -> Batch<T> {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::Norm(l) => l.forward(x),
            Layer::Relu(l) => l.forward(x),
            Layer::Pool(l) => l.forward(x),
            Layer::GlobalAvg(l) => l.forward(x),
            Layer::Dense(l) => l.forward(x),
        }
    }

    pub fn backward(&mut self, g: Batch<T>) -> Batch<T> {
        match self {
            Layer::Conv(l) => l.backward(&g),
            Layer::Norm(l) => l.backward(g),
            Layer::Relu(l) => l.backward(g),
            Layer::Pool(l) => l.backward(&g),
            Layer::GlobalAvg(l) => l.backward(&g),
            Layer::Dense(l) => l.backward(&g),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv(l) => {
                let mut v = vec![&mut l.weight];
                if let Some(b) = &mut l.bias {
                    v.push(b);
                }
                v
            }
            Layer::Norm(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }
}

/// A feed-forward stack of layers.
#[derive(Clone, Debug)]
pub struct Sequential<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> Sequential<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn infer(&self, x: Batch<T>) -> Batch<T> {
        self.layers.iter().fold(x, |x, l| l.infer(x))
    }

    /// Training-mode forward pass; caches what backward needs.
    pub fn forward(&mut self, x: Batch<T>) -> Batch<T> {
        self.layers.iter_mut().fold(x, |x, l| l.forward(x))
    }

    pub fn backward(&mut self, g: Batch<T>) -> Batch<T> {
        self.layers.iter_mut().rev().fold(g, |g, l| l.backward(g))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.weight.value.len() + c.bias.as_ref().map_or(0, |b| b.value.len()),
                Layer::Norm(n) => 2 * n.channels(),
                Layer::Dense(d) => d.weight.value.len() + d.bias.value.len(),
                _ => 0,
            })
            .sum()
    }

    /// Every stored number (parameters then running statistics) in layer order.
    pub fn state(&self) -> Vec<(String, Vec<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Conv(c) => {
                    out.push((format!("{i}.weight"), c.weight.value.clone()));
                    if let Some(b) = &c.bias {
                        out.push((format!("{i}.bias"), b.value.clone()));
                    }
                }
                Layer::Norm(n) => {
                    out.push((format!("{i}.weight"), n.gamma.value.clone()));
                    out.push((format!("{i}.bias"), n.beta.value.clone()));
                    out.push((format!("{i}.running_mean"), n.running_mean.clone()));
                    out.push((format!("{i}.running_var"), n.running_var.clone()));
                }
                Layer::Dense(d) => {
                    out.push((format!("{i}.weight"), d.weight.value.clone()));
                    out.push((format!("{i}.bias"), d.bias.value.clone()));
                }
                _ => {}
            }
        }
        out
    }

    /// Inverse of [`Sequential::state`] for an identically shaped stack.
    pub fn load_state(&mut self, mut lookup: impl FnMut(&str) -> Option<Vec<T>>) -> Result<()> {
        let mut fetch = |name: String, len: usize| -> Result<Vec<T>> {
            let v = lookup(&name).ok_or_else(|| invalid_argument(format!("missing tensor {name}")))?;
            if v.len() != len {
                return Err(invalid_argument(format!("tensor {name} has {} values, expected {len}", v.len())));
            }
            Ok(v)
        };
        for (i, l) in self.layers.iter_mut().enumerate() {
            match l {
                Layer::Conv(c) => {
                    c.weight = Param::new(fetch(format!("{i}.weight"), c.weight.value.len())?);
                    if let Some(b) = &mut c.bias {
                        *b = Param::new(fetch(format!("{i}.bias"), b.value.len())?);
                    }
                }
                Layer::Norm(n) => {
                    let ch = n.channels();
                    n.gamma = Param::new(fetch(format!("{i}.weight"), ch)?);
                    n.beta = Param::new(fetch(format!("{i}.bias"), ch)?);
                    n.running_mean = fetch(format!("{i}.running_mean"), ch)?;
                    n.running_var = fetch(format!("{i}.running_var"), ch)?;
                }
                Layer::Dense(d) => {
                    d.weight = Param::new(fetch(format!("{i}.weight"), d.weight.value.len())?);
                    d.bias = Param::new(fetch(format!("{i}.bias"), d.bias.value.len())?);
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Adam with L2 weight decay folded into the gradient (PyTorch semantics).
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps: 1e-8, weight_decay, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step<T: Real>(&mut self, params: &mut [&mut Param<T>], lr: f64) {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.second = self.first.clone();
        }
        assert_eq!(self.first.len(), params.len(), "parameter set changed between steps");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
            for i in 0..p.value.len() {
                let theta = p.value[i].to_f64().unwrap();
                let g = p.grad[i].to_f64().unwrap() + self.weight_decay * theta;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p.value[i] = T::lit(theta - update);
            }
        }
    }

    /// Optimizer moments, for checkpointing.
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    pub fn restore(&mut self, step: u64, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>) {
        self.step = step;
        self.first = first;
        self.second = second;
    }
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &[f64], cin: usize, h: usize, w: usize, weight: &[f64], cout: usize) -> Vec<f64> {
        let mut out = vec![0.0; cout * h * w];
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    s += weight[((co * cin + ci) * 3 + ky) * 3 + kx]
                                        * x[(ci * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                    }
                    out[(co * h + y) * w + xx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (cin, cout, h, w, n) = (3, 4, 5, 6, 40);
        let conv = Conv3x3::<f64>::new(cin, cout, false, &mut rng);
        let nchw: Vec<f64> = (0..n * cin * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = conv.infer(&Batch::from_nchw(n, cin, h, w, &nchw));
        for s in 0..n {
            let expect = naive_conv(&nchw[s * cin * h * w..(s + 1) * cin * h * w], cin, h, w, &conv.weight.value, cout);
            for co in 0..cout {
                for p in 0..h * w {
                    let got = out.data[(co * n + s) * h * w + p];
                    assert!((got - expect[co * h * w + p]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn direct_and_im2col_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(cin, cout, h, w, n) in &[(3usize, 5usize, 7usize, 6usize, 3usize), (2, 2, 1, 1, 2), (4, 3, 4, 9, 1)] {
            let mut a = Conv3x3::<f64>::new(cin, cout, true, &mut rng);
            let mut b = a.clone();
            let nchw: Vec<f64> = (0..n * cin * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = Batch::from_nchw(n, cin, h, w, &nchw);
            let ya = a.infer_direct(&x);
            let yb = b.infer_im2col(&x);
            ya.data.iter().zip(&yb.data).for_each(|(p, q)| assert!((p - q).abs() < 1e-12));
            let g = Batch { data: (0..ya.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect(), ..ya };
            let da = a.backward_direct(&x, &g);
            let db = b.backward_im2col(&x, &g);
            da.data.iter().zip(&db.data).for_each(|(p, q)| assert!((p - q).abs() < 1e-12));
            a.weight.grad.iter().zip(&b.weight.grad).for_each(|(p, q)| assert!((p - q).abs() < 1e-12));
        }
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut bn = BatchNorm::<f64>::new(1);
        bn.running_mean = vec![2.0];
        bn.running_var = vec![4.0 - 1e-5];
        let out = bn.infer(Batch { channels: 1, count: 1, height: 1, width: 2, data: vec![2.0, 4.0] });
        assert!((out.data[0]).abs() < 1e-12 && (out.data[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut pool = MaxPool2::default();
        let x = Batch { channels: 1, count: 1, height: 2, width: 2, data: vec![0.1f64, 0.7, 0.3, 0.2] };
        let y = pool.forward(x);
        assert_eq!(y.data, vec![0.7]);
        let g = pool.backward(&Batch { channels: 1, count: 1, height: 1, width: 1, data: vec![1.0] });
        assert_eq!(g.data, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn adam_zero_gradient_moves_only_by_weight_decay() {
        // g = wd * theta, so m_hat = g and v_hat = g^2 on the first step:
        // theta' = theta - lr * g / (|g| + eps).
        let mut p = Param::new(vec![2.0f64]);
        let mut opt = Adam::new(0.9, 0.999, 5e-4);
        opt.step(&mut [&mut p], 1e-4);
        let g = 5e-4 * 2.0;
        let expect = 2.0 - 1e-4 * g / (g + 1e-8);
        assert!((p.value[0] - expect).abs() < 1e-15);

        let mut q = Param::new(vec![2.0f64]);
        let mut plain = Adam::new(0.9, 0.999, 0.0);
        plain.step(&mut [&mut q], 1e-4);
        assert_eq!(q.value[0], 2.0);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f32), 0.0);
        assert_eq!(sigmoid(1000.0f32), 1.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }
}
