//! Dense NCHW tensors and the numeric kernels behind the network layers.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Four-dimensional `f64` tensor in NCHW layout.
///
/// Convolution weights use `(out, in / groups, kh, kw)`; per-channel vectors
/// use `(1, C, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// Per-channel vector of shape `(1, C, 1, 1)`.
    pub fn channel_vector(values: Vec<f64>) -> Self {
        Self {
            shape: [1, values.len(), 1, 1],
            data: values,
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.shape[2]
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.shape[3]
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f64 {
        let o = self.offset(n, c, h, w);
        &mut self.data[o]
    }

    /// Contiguous `C x H x W` block of sample `n`.
    pub fn sample(&self, n: usize) -> &[f64] {
        let s = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * s..(n + 1) * s]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f64] {
        let s = self.shape[1] * self.shape[2] * self.shape[3];
        &mut self.data[n * s..(n + 1) * s]
    }

    /// Copy of samples `start..end`.
    pub fn slice_batch(&self, start: usize, end: usize) -> Tensor {
        let [_, c, h, w] = self.shape();
        let per = c * h * w;
        Tensor::from_vec([end - start, c, h, w], self.data()[start * per..end * per].to_vec())
            .expect("sample range within batch")
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Copies sample `src_n` of `src` into sample `dst_n` of `self`.
    pub fn copy_sample_from(&mut self, dst_n: usize, src: &Tensor, src_n: usize) {
        self.sample_mut(dst_n).copy_from_slice(src.sample(src_n));
    }
}

/// Stride, zero padding and channel grouping of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub const fn new(stride: usize, pad: usize, groups: usize) -> Self {
        Self { stride, pad, groups }
    }

    #[inline]
    pub fn output_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad - kernel) / self.stride + 1
    }
}

fn conv_dims(x: &Tensor, w: &Tensor, g: ConvGeometry) -> Result<(usize, usize)> {
    let [_, cin, h, wd] = x.shape;
    let [cout, cin_g, kh, kw] = w.shape;
    if g.groups == 0 || cin % g.groups != 0 || cout % g.groups != 0 || cin / g.groups != cin_g {
        return Err(Error::Shape(format!(
            "conv input has {cin} channels, weight {:?} with {} groups",
            w.shape, g.groups
        )));
    }
    if h + 2 * g.pad < kh || wd + 2 * g.pad < kw || g.stride == 0 {
        return Err(Error::Shape(format!(
            "conv kernel {kh}x{kw} larger than padded input {h}x{wd}"
        )));
    }
    Ok((g.output_size(h, kh), g.output_size(wd, kw)))
}

#[derive(Clone, Copy)]
struct Patch {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
}

impl Patch {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds `src` (`channels x height x width`) into a
    /// `(channels*kh*kw) x (out_h*out_w)` matrix.
    fn im2col(&self, src: &[f64], col: &mut [f64]) {
        let cols = self.cols();
        for c in 0..self.channels {
            let plane = &src[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * cols..(row + 1) * cols];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        if iy < 0 || iy >= self.height as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src_line = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        if self.stride == 1 {
                            for (ox, v) in line.iter_mut().enumerate() {
                                let ix = (ox + kj) as isize - self.pad as isize;
                                *v = if ix >= 0 && (ix as usize) < self.width {
                                    src_line[ix as usize]
                                } else {
                                    0.0
                                };
                            }
                        } else {
                            for (ox, v) in line.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                *v = if ix >= 0 && (ix as usize) < self.width {
                                    src_line[ix as usize]
                                } else {
                                    0.0
                                };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Patch::im2col`]: scatters columns back, accumulating.
    fn col2im(&self, col: &[f64], dst: &mut [f64]) {
        let cols = self.cols();
        for c in 0..self.channels {
            let plane = &mut dst[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &col[row * cols..(row + 1) * cols];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let line = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        let dst_line =
                            &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        for (ox, v) in line.iter().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.width {
                                dst_line[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

const TILE_ROWS: usize = 4;
const TILE_COLS: usize = 8;

/// Accumulates a `TILE_ROWS x TILE_COLS` block of `c` at `(i, j)`, keeping the
/// block in registers across the `k` loop. `apack` holds the tile's rows of
/// the left operand as `[l][r]`, `bpack` its columns of the right operand as
/// `[l][t]`.
#[inline(always)]
fn tile_kernel(apack: &[f64], bpack: &[f64], n: usize, j: usize, c: &mut [f64], i: usize) {
    let mut acc = [[0.0f64; TILE_COLS]; TILE_ROWS];
    for (av, bv) in apack.chunks_exact(TILE_ROWS).zip(bpack.chunks_exact(TILE_COLS)) {
        let av: &[f64; TILE_ROWS] = av.try_into().unwrap();
        let bv: &[f64; TILE_COLS] = bv.try_into().unwrap();
        for r in 0..TILE_ROWS {
            for t in 0..TILE_COLS {
                acc[r][t] += av[r] * bv[t];
            }
        }
    }
    for (r, row) in acc.iter().enumerate() {
        let dst = &mut c[(i + r) * n + j..(i + r) * n + j + TILE_COLS];
        for t in 0..TILE_COLS {
            dst[t] += row[t];
        }
    }
}

/// Blocked `c[m x n] += A * B` with `A(i, l)` and `B(l, j)` given by
/// accessors. Both operands are packed into tile-contiguous panels first.
fn gemm_generic(
    m: usize,
    n: usize,
    k: usize,
    a: impl Fn(usize, usize) -> f64,
    b: impl Fn(usize, usize) -> f64,
    c: &mut [f64],
) {
    let full_rows = m - m % TILE_ROWS;
    let full_cols = n - n % TILE_COLS;
    let mut apack = vec![0.0; full_rows * k];
    for (p, panel) in apack.chunks_exact_mut(k * TILE_ROWS).enumerate() {
        for l in 0..k {
            for r in 0..TILE_ROWS {
                panel[l * TILE_ROWS + r] = a(p * TILE_ROWS + r, l);
            }
        }
    }
    let mut bpack = vec![0.0; k * TILE_COLS];
    let mut j = 0;
    while j < full_cols {
        for l in 0..k {
            for t in 0..TILE_COLS {
                bpack[l * TILE_COLS + t] = b(l, j + t);
            }
        }
        for (p, panel) in apack.chunks_exact(k * TILE_ROWS).enumerate() {
            tile_kernel(panel, &bpack, n, j, c, p * TILE_ROWS);
        }
        j += TILE_COLS;
    }
    // ragged right edge
    if full_cols < n {
        for i in 0..full_rows {
            for l in 0..k {
                let av = a(i, l);
                for jj in full_cols..n {
                    c[i * n + jj] += av * b(l, jj);
                }
            }
        }
    }
    // ragged bottom edge
    for i in full_rows..m {
        for l in 0..k {
            let av = a(i, l);
            for jj in 0..n {
                c[i * n + jj] += av * b(l, jj);
            }
        }
    }
}

/// `c[m x n] += a[m x k] * b[k x n]`, row-major, `a` with row stride `lda`.
fn gemm_nn(m: usize, n: usize, k: usize, a: &[f64], lda: usize, b: &[f64], c: &mut [f64]) {
    gemm_generic(m, n, k, |i, l| a[i * lda + l], |l, j| b[l * n + j], c);
}

/// `c[m x n] += a^T * b` where `a` is `k x m` (row stride `lda`) and `b` is `k x n`.
fn gemm_tn(m: usize, n: usize, k: usize, a: &[f64], lda: usize, b: &[f64], c: &mut [f64]) {
    gemm_generic(m, n, k, |i, l| a[l * lda + i], |l, j| b[l * n + j], c);
}

/// `c[m x n] += a[m x k] * b[n x k]^T`, `c` with row stride `n`.
fn gemm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_generic(m, n, k, |i, l| a[i * k + l], |l, j| b[j * k + l], c);
}

/// 2-D cross-correlation with optional per-output-channel bias.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, g: ConvGeometry) -> Result<Tensor> {
    let (out_h, out_w) = conv_dims(x, w, g)?;
    let [batch, cin, h, wd] = x.shape;
    let [cout, cin_g, kh, kw] = w.shape;
    let cout_g = cout / g.groups;
    let patch = Patch {
        channels: cin_g,
        height: h,
        width: wd,
        kh,
        kw,
        out_h,
        out_w,
        stride: g.stride,
        pad: g.pad,
    };
    let (rows, cols) = (patch.rows(), patch.cols());
    let mut out = Tensor::zeros([batch, cout, out_h, out_w]);
    let mut col = if patch.is_pointwise() { Vec::new() } else { vec![0.0; rows * cols] };
    for n in 0..batch {
        let src = x.sample(n);
        let dst = out.sample_mut(n);
        if let Some(b) = bias {
            for (o, chunk) in dst.chunks_exact_mut(cols).enumerate() {
                chunk.fill(b.data[o]);
            }
        }
        for grp in 0..g.groups {
            let src_g = &src[grp * cin_g * h * wd..(grp + 1) * cin_g * h * wd];
            let bmat: &[f64] = if patch.is_pointwise() {
                src_g
            } else {
                patch.im2col(src_g, &mut col);
                &col
            };
            let wmat = &w.data[grp * cout_g * rows..(grp + 1) * cout_g * rows];
            let cmat = &mut dst[grp * cout_g * cols..(grp + 1) * cout_g * cols];
            gemm_nn(cout_g, cols, rows, wmat, rows, bmat, cmat);
        }
    }
    let _ = cin;
    Ok(out)
}

/// Gradients of a convolution: `(dx, dw, db)`. `dx` is skipped when
/// `need_input_grad` is false; `db` is the per-channel sum of `dy`.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: ConvGeometry,
    dy: &Tensor,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    let (out_h, out_w) = conv_dims(x, w, g)?;
    let [batch, _, h, wd] = x.shape;
    let [cout, cin_g, kh, kw] = w.shape;
    if dy.shape != [batch, cout, out_h, out_w] {
        return Err(Error::Shape(format!(
            "conv gradient {:?} does not match output {:?}",
            dy.shape,
            [batch, cout, out_h, out_w]
        )));
    }
    let cout_g = cout / g.groups;
    let patch = Patch {
        channels: cin_g,
        height: h,
        width: wd,
        kh,
        kw,
        out_h,
        out_w,
        stride: g.stride,
        pad: g.pad,
    };
    let (rows, cols) = (patch.rows(), patch.cols());
    let mut dw = Tensor::zeros(w.shape);
    let mut db = Tensor::zeros([1, cout, 1, 1]);
    let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape));
    let pointwise = patch.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![0.0; rows * cols] };
    let mut dcol = if pointwise || !need_input_grad { Vec::new() } else { vec![0.0; rows * cols] };
    for n in 0..batch {
        let src = x.sample(n);
        let grad = dy.sample(n);
        for (o, chunk) in grad.chunks_exact(cols).enumerate() {
            db.data[o] += chunk.iter().sum::<f64>();
        }
        for grp in 0..g.groups {
            let in_len = cin_g * h * wd;
            let src_g = &src[grp * in_len..(grp + 1) * in_len];
            let bmat: &[f64] = if pointwise {
                src_g
            } else {
                patch.im2col(src_g, &mut col);
                &col
            };
            let gmat = &grad[grp * cout_g * cols..(grp + 1) * cout_g * cols];
            let dwmat = &mut dw.data[grp * cout_g * rows..(grp + 1) * cout_g * rows];
            gemm_nt(cout_g, rows, cols, gmat, bmat, dwmat);
            if let Some(dx) = dx.as_mut() {
                let wmat = &w.data[grp * cout_g * rows..(grp + 1) * cout_g * rows];
                let dst = &mut dx.sample_mut(n)[grp * in_len..(grp + 1) * in_len];
                if pointwise {
                    gemm_tn(rows, cols, cout_g, wmat, rows, gmat, dst);
                } else {
                    dcol.fill(0.0);
                    gemm_tn(rows, cols, cout_g, wmat, rows, gmat, &mut dcol);
                    patch.col2im(&dcol, dst);
                }
            }
        }
    }
    Ok((dx, dw, db))
}

/// Cached statistics of a batch-normalization forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormCache {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Whether `mean`/`inv_std` came from the batch (training) or from
    /// running estimates (inference).
    pub batch_stats: bool,
}

pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch statistics: `(mean, biased variance)`.
pub fn channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let [batch, c, h, w] = x.shape;
    let count = (batch * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for n in 0..batch {
        for ch in 0..c {
            let o = x.offset(n, ch, 0, 0);
            mean[ch] += x.data[o..o + h * w].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for n in 0..batch {
        for ch in 0..c {
            let o = x.offset(n, ch, 0, 0);
            let m = mean[ch];
            var[ch] += x.data[o..o + h * w].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

/// `y = gamma * (x - mean) * inv_std + beta` per channel.
pub fn batch_norm_apply(x: &Tensor, gamma: &Tensor, beta: &Tensor, cache: &NormCache) -> Tensor {
    let [batch, c, h, w] = x.shape;
    let mut out = Tensor::zeros(x.shape);
    for n in 0..batch {
        for ch in 0..c {
            let o = x.offset(n, ch, 0, 0);
            let scale = gamma.data[ch] * cache.inv_std[ch];
            let shift = beta.data[ch] - cache.mean[ch] * scale;
            for (d, s) in out.data[o..o + h * w].iter_mut().zip(&x.data[o..o + h * w]) {
                *d = s * scale + shift;
            }
        }
    }
    out
}

/// Gradients of batch normalization: `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    cache: &NormCache,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let [batch, c, h, w] = x.shape;
    let count = (batch * h * w) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for n in 0..batch {
        for ch in 0..c {
            let o = x.offset(n, ch, 0, 0);
            let (m, is) = (cache.mean[ch], cache.inv_std[ch]);
            for (xv, gv) in x.data[o..o + h * w].iter().zip(&dy.data[o..o + h * w]) {
                dbeta[ch] += gv;
                dgamma[ch] += gv * (xv - m) * is;
            }
        }
    }
    let mut dx = Tensor::zeros(x.shape);
    for n in 0..batch {
        for ch in 0..c {
            let o = x.offset(n, ch, 0, 0);
            let (m, is, gm) = (cache.mean[ch], cache.inv_std[ch], gamma.data[ch]);
            let src = &x.data[o..o + h * w];
            let grad = &dy.data[o..o + h * w];
            let dst = &mut dx.data[o..o + h * w];
            if cache.batch_stats {
                let k = gm * is / count;
                for ((d, xv), gv) in dst.iter_mut().zip(src).zip(grad) {
                    let xhat = (xv - m) * is;
                    *d = k * (count * gv - dbeta[ch] - xhat * dgamma[ch]);
                }
            } else {
                for (d, gv) in dst.iter_mut().zip(grad) {
                    *d = gm * is * gv;
                }
            }
        }
    }
    (
        dx,
        Tensor::channel_vector(dgamma),
        Tensor::channel_vector(dbeta),
    )
}

/// Pointwise nonlinearities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    /// `min(max(x, 0), 6)`.
    Relu6,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::LeakyRelu(s) => {
                if v > 0.0 {
                    v
                } else {
                    s * v
                }
            }
            Activation::Relu6 => v.clamp(0.0, 6.0),
        }
    }

    /// Derivative at input `v` (right-continuous conventions at the kinks).
    #[inline]
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Relu => (v > 0.0) as u8 as f64,
            Activation::LeakyRelu(s) => {
                if v > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Relu6 => (v > 0.0 && v < 6.0) as u8 as f64,
        }
    }
}

/// Concatenates tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
    let [batch, _, h, w] = first.shape;
    if parts.iter().any(|p| p.shape[0] != batch || p.shape[2] != h || p.shape[3] != w) {
        return Err(Error::Shape("concat inputs differ in batch or spatial size".into()));
    }
    let c: usize = parts.iter().map(|p| p.shape[1]).sum();
    let mut out = Tensor::zeros([batch, c, h, w]);
    for n in 0..batch {
        let mut at = 0;
        let dst = out.sample_mut(n);
        for p in parts {
            let src = p.sample(n);
            dst[at..at + src.len()].copy_from_slice(src);
            at += src.len();
        }
    }
    Ok(out)
}

/// Nearest-neighbour 2x upsampling cropped to `out_h x out_w`.
pub fn upsample2x(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [batch, c, h, w] = x.shape;
    if out_h > 2 * h || out_w > 2 * w {
        return Err(Error::Shape(format!(
            "cannot upsample {h}x{w} to {out_h}x{out_w}"
        )));
    }
    let mut out = Tensor::zeros([batch, c, out_h, out_w]);
    for n in 0..batch {
        for ch in 0..c {
            for i in 0..out_h {
                for j in 0..out_w {
                    *out.at_mut(n, ch, i, j) = x.at(n, ch, i / 2, j / 2);
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`upsample2x`].
pub fn upsample2x_backward(dy: &Tensor, in_shape: [usize; 4]) -> Tensor {
    let [batch, c, out_h, out_w] = dy.shape;
    let mut dx = Tensor::zeros(in_shape);
    for n in 0..batch {
        for ch in 0..c {
            for i in 0..out_h {
                for j in 0..out_w {
                    *dx.at_mut(n, ch, i / 2, j / 2) += dy.at(n, ch, i, j);
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct seven-loop convolution.
    fn naive_conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, g: ConvGeometry) -> Tensor {
        let [batch, cin, h, wd] = x.shape();
        let [cout, cin_g, kh, kw] = w.shape();
        let (oh, ow) = (g.output_size(h, kh), g.output_size(wd, kw));
        let cout_g = cout / g.groups;
        let mut out = Tensor::zeros([batch, cout, oh, ow]);
        for n in 0..batch {
            for o in 0..cout {
                let grp = o / cout_g;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut s = b.map_or(0.0, |b| b.data()[o]);
                        for ci in 0..cin_g {
                            let c = grp * cin_g + ci;
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let y = (i * g.stride + ki) as isize - g.pad as isize;
                                    let xx = (j * g.stride + kj) as isize - g.pad as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                        s += x.at(n, c, y as usize, xx as usize) * w.at(o, ci, ki, kj);
                                    }
                                }
                            }
                        }
                        *out.at_mut(n, o, i, j) = s;
                    }
                }
            }
        }
        let _ = cin;
        out
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    const CASES: [([usize; 4], [usize; 4], ConvGeometry); 5] = [
        ([2, 3, 7, 6], [5, 3, 3, 3], ConvGeometry::new(1, 1, 1)),
        ([1, 4, 9, 9], [6, 4, 3, 3], ConvGeometry::new(2, 1, 1)),
        ([2, 6, 5, 5], [8, 6, 1, 1], ConvGeometry::new(1, 0, 1)),
        ([1, 6, 8, 7], [6, 1, 3, 3], ConvGeometry::new(2, 1, 6)),
        ([2, 4, 6, 6], [6, 2, 3, 3], ConvGeometry::new(1, 1, 2)),
    ];

    #[test]
    fn conv_forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (xs, ws, g) in CASES {
            let x = random(xs, &mut rng);
            let w = random(ws, &mut rng);
            let b = Tensor::channel_vector((0..ws[0]).map(|i| i as f64 * 0.1).collect());
            let fast = conv2d_forward(&x, &w, Some(&b), g).unwrap();
            assert!(max_diff(&fast, &naive_conv(&x, &w, Some(&b), g)) < 1e-12);
        }
    }

    /// Backward is checked as the adjoint of forward:
    /// `<dy, conv(x)> ` differentiated by finite differences in `x` and `w`.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (xs, ws, g) in CASES {
            let x = random(xs, &mut rng);
            let w = random(ws, &mut rng);
            let y = conv2d_forward(&x, &w, None, g).unwrap();
            let dy = random(y.shape(), &mut rng);
            let (dx, dw, db) = conv2d_backward(&x, &w, g, &dy, true).unwrap();
            let dx = dx.unwrap();
            let objective = |x: &Tensor, w: &Tensor| {
                let y = conv2d_forward(x, w, None, g).unwrap();
                y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let eps = 1e-6;
            for _ in 0..10 {
                let i = rng.gen_range(0..x.len());
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp.data_mut()[i] += eps;
                xm.data_mut()[i] -= eps;
                let fd = (objective(&xp, &w) - objective(&xm, &w)) / (2.0 * eps);
                assert!((fd - dx.data()[i]).abs() < 1e-6, "dx {fd} vs {}", dx.data()[i]);
                let k = rng.gen_range(0..w.len());
                let (mut wp, mut wm) = (w.clone(), w.clone());
                wp.data_mut()[k] += eps;
                wm.data_mut()[k] -= eps;
                let fd = (objective(&x, &wp) - objective(&x, &wm)) / (2.0 * eps);
                assert!((fd - dw.data()[k]).abs() < 1e-6, "dw {fd} vs {}", dw.data()[k]);
            }
            for o in 0..ws[0] {
                let expected: f64 = (0..dy.batch())
                    .map(|n| dy.sample(n)[o * y.height() * y.width()..(o + 1) * y.height() * y.width()].iter().sum::<f64>())
                    .sum();
                assert!((db.data()[o] - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn batch_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random([3, 2, 3, 4], &mut rng);
        let gamma = Tensor::channel_vector(vec![1.3, -0.7]);
        let beta = Tensor::channel_vector(vec![0.2, 0.5]);
        let dy = random(x.shape(), &mut rng);
        let forward = |x: &Tensor, gamma: &Tensor| {
            let (mean, var) = channel_moments(x);
            let cache = NormCache {
                mean,
                inv_std: var.iter().map(|v| 1.0 / libm::sqrt(v + BN_EPS)).collect(),
                batch_stats: true,
            };
            let y = batch_norm_apply(x, gamma, &beta, &cache);
            (y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum::<f64>(), cache)
        };
        let (_, cache) = forward(&x, &gamma);
        let (dx, dgamma, _) = batch_norm_backward(&x, &gamma, &cache, &dy);
        let eps = 1e-6;
        for i in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += eps;
            xm.data_mut()[i] -= eps;
            let fd = (forward(&xp, &gamma).0 - forward(&xm, &gamma).0) / (2.0 * eps);
            assert!((fd - dx.data()[i]).abs() < 1e-5, "{fd} vs {}", dx.data()[i]);
        }
        let mut gp = gamma.clone();
        gp.data_mut()[1] += eps;
        let mut gm = gamma.clone();
        gm.data_mut()[1] -= eps;
        let fd = (forward(&x, &gp).0 - forward(&x, &gm).0) / (2.0 * eps);
        assert!((fd - dgamma.data()[1]).abs() < 1e-6);
    }

    #[test]
    fn upsample_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random([1, 2, 3, 3], &mut rng);
        let y = upsample2x(&x, 5, 6).unwrap();
        let dy = random(y.shape(), &mut rng);
        let dx = upsample2x_backward(&dy, x.shape());
        let lhs: f64 = y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        assert!(upsample2x(&x, 7, 6).is_err());
    }
}
