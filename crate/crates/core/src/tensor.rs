//! Rank-4 `(n, c, h, w)` float tensors and the kernels every network block
//! reduces to: convolution, max pooling, SiLU, nearest upsampling, channel
//! concatenation and elementwise addition.
//!
//! All kernels are pure. Convolution is parallelised over output-channel
//! blocks, but every output element is accumulated in the same order no
//! matter how the work is scheduled, so results are bitwise identical for
//! any thread count.

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: {dim} mismatch (expected {expected}, got {actual})")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

impl TensorError {
    fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        TensorError::Invalid { op, msg: msg.into() }
    }
}

fn check_dim(
    op: &'static str,
    dim: &'static str,
    expected: usize,
    actual: usize,
) -> Result<(), TensorError> {
    if expected == actual {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            dim,
            expected,
            actual,
        })
    }
}

/// Dense row-major `(n, c, h, w)` tensor of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Result<Self, TensorError> {
        let len: usize = shape.iter().product();
        check_dim("Tensor::new", "data length", len, data.len())?;
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f32) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_fn(shape: [usize; 4], mut f: impl FnMut([usize; 4]) -> f32) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([b, ch, y, x]));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, [b, c, y, x]: [usize; 4]) -> usize {
        let [_, cc, hh, ww] = self.shape;
        ((b * cc + c) * hh + y) * ww + x
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> f32 {
        self.data[self.index(idx)]
    }

    /// Contiguous `h*w` plane of one channel.
    pub fn plane(&self, b: usize, c: usize) -> &[f32] {
        let hw = self.shape[2] * self.shape[3];
        let start = (b * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    /// Channels `[start, end)` as a new tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor, TensorError> {
        let [n, c, h, w] = self.shape;
        if start > end || end > c {
            return Err(TensorError::invalid(
                "slice_channels",
                format!("range {start}..{end} out of bounds for {c} channels"),
            ));
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * (end - start) * hw);
        for b in 0..n {
            let base = b * c * hw;
            data.extend_from_slice(&self.data[base + start * hw..base + end * hw]);
        }
        Ok(Tensor {
            shape: [n, end - start, h, w],
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Convolution weights `(out, in, k, k)` with per-output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvParams {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self, TensorError> {
        let p = ConvParams {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weights,
            bias,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        ConvParams {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weights: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        if self.kernel == 0 {
            return Err(TensorError::invalid("conv2d", "kernel size must be >= 1"));
        }
        if self.stride == 0 {
            return Err(TensorError::invalid("conv2d", "stride must be >= 1"));
        }
        check_dim(
            "conv2d",
            "weights length",
            self.out_channels * self.in_channels * self.kernel * self.kernel,
            self.weights.len(),
        )?;
        check_dim("conv2d", "bias length", self.out_channels, self.bias.len())
    }

    /// Length of one filter, `in * k * k`.
    pub fn filter_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize), TensorError> {
        window_output("conv2d", h, w, self.kernel, self.stride, self.padding)
    }
}

fn window_output(
    op: &'static str,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
) -> Result<(usize, usize), TensorError> {
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    if k > ph || k > pw {
        return Err(TensorError::invalid(
            op,
            format!("window {k} larger than padded input {ph}x{pw}"),
        ));
    }
    Ok(((ph - k) / s + 1, (pw - k) / s + 1))
}

/// Per-channel batch-norm statistics and affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub epsilon: f32,
}

impl BnParams {
    /// gamma=1, beta=0, mean=0, var=1.
    pub fn identity(channels: usize, epsilon: f32) -> Self {
        BnParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let c = self.gamma.len();
        check_dim("batchnorm", "beta length", c, self.beta.len())?;
        check_dim("batchnorm", "running_mean length", c, self.running_mean.len())?;
        check_dim("batchnorm", "running_var length", c, self.running_var.len())?;
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(TensorError::invalid("batchnorm", "negative running variance"));
        }
        Ok(())
    }

    /// Applies the normalisation to a tensor whose channel axis matches.
    pub fn apply(&self, input: &Tensor) -> Result<Tensor, TensorError> {
        self.validate()?;
        check_dim("batchnorm", "channels", self.channels(), input.channels())?;
        let [n, c, h, w] = input.shape();
        let hw = h * w;
        let mut out = input.clone();
        for b in 0..n {
            for ch in 0..c {
                let scale = self.gamma[ch] / (self.running_var[ch] + self.epsilon).sqrt();
                let shift = self.beta[ch] - self.running_mean[ch] * scale;
                let start = (b * c + ch) * hw;
                for v in &mut out.data[start..start + hw] {
                    *v = *v * scale + shift;
                }
            }
        }
        Ok(out)
    }
}

// Output channels handled together and column tile width for the GEMM.
const ROW_BLOCK: usize = 8;
const COL_TILE: usize = 128;

/// 2-D convolution. The result matches the direct definition
/// `out[o,y,x] = bias[o] + sum_{i,ky,kx} w[o,i,ky,kx] * in[i, y*s+ky-p, x*s+kx-p]`
/// with zero padding.
pub fn conv2d(input: &Tensor, params: &ConvParams) -> Result<Tensor, TensorError> {
    params.validate()?;
    check_dim("conv2d", "input channels", params.in_channels, input.channels())?;
    let [n, cin, h, w] = input.shape();
    let (oh, ow) = params.output_hw(h, w)?;
    let cout = params.out_channels;
    let ohw = oh * ow;
    let mut out = vec![0.0f32; n * cout * ohw];
    if ohw == 0 || cout == 0 {
        return Tensor::new([n, cout, oh, ow], out);
    }

    let pointwise = params.kernel == 1 && params.stride == 1 && params.padding == 0;
    let mut cols = Vec::new();
    for b in 0..n {
        let image = &input.data[b * cin * h * w..(b + 1) * cin * h * w];
        let cols_ref: &[f32] = if pointwise {
            image
        } else {
            im2col(image, cin, h, w, params, oh, ow, &mut cols);
            &cols
        };
        let out_b = &mut out[b * cout * ohw..(b + 1) * cout * ohw];
        gemm_bias(&params.weights, &params.bias, cols_ref, params.filter_len(), ohw, out_b);
    }
    Tensor::new([n, cout, oh, ow], out)
}

/// Lays out every receptive field as a column: row `(i, ky, kx)`, column `(y, x)`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    image: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    params: &ConvParams,
    oh: usize,
    ow: usize,
    cols: &mut Vec<f32>,
) {
    let k = params.kernel;
    let (s, p) = (params.stride as isize, params.padding as isize);
    let ohw = oh * ow;
    cols.clear();
    cols.resize(cin * k * k * ohw, 0.0);
    for i in 0..cin {
        let plane = &image[i * h * w..(i + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((i * k + ky) * k + kx) * ohw..][..ohw];
                for y in 0..oh {
                    let iy = y as isize * s + ky as isize - p;
                    let dst = &mut row[y * ow..(y + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (x, d) in dst.iter_mut().enumerate() {
                        let ix = x as isize * s + kx as isize - p;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// `out[o, j] = (sum_kk weights[o, kk] * cols[kk, j]) + bias[o]`, accumulating
/// `kk` in ascending order for every element.
fn gemm_bias(weights: &[f32], bias: &[f32], cols: &[f32], kdim: usize, ncols: usize, out: &mut [f32]) {
    out.par_chunks_mut(ROW_BLOCK * ncols)
        .enumerate()
        .for_each(|(blk, out_rows)| {
            let row0 = blk * ROW_BLOCK;
            let rows = out_rows.len() / ncols;
            let w_rows = &weights[row0 * kdim..(row0 + rows) * kdim];
            let mut acc = [[0.0f32; COL_TILE]; ROW_BLOCK];
            let mut j0 = 0;
            while j0 < ncols {
                let width = COL_TILE.min(ncols - j0);
                for a in acc.iter_mut().take(rows) {
                    a[..width].fill(0.0);
                }
                for kk in 0..kdim {
                    let col = &cols[kk * ncols + j0..kk * ncols + j0 + width];
                    for (r, a) in acc.iter_mut().enumerate().take(rows) {
                        let wv = w_rows[r * kdim + kk];
                        for (dst, &c) in a[..width].iter_mut().zip(col) {
                            *dst += wv * c;
                        }
                    }
                }
                for (r, a) in acc.iter().enumerate().take(rows) {
                    let bv = bias[row0 + r];
                    let dst = &mut out_rows[r * ncols + j0..r * ncols + j0 + width];
                    for (d, &v) in dst.iter_mut().zip(&a[..width]) {
                        *d = v + bv;
                    }
                }
                j0 += width;
            }
        });
}

/// Max pooling with `-inf` padding.
pub fn maxpool2d(input: &Tensor, k: usize, stride: usize, padding: usize) -> Result<Tensor, TensorError> {
    if k == 0 || stride == 0 {
        return Err(TensorError::invalid("maxpool2d", "kernel and stride must be >= 1"));
    }
    let [n, c, h, w] = input.shape();
    let (oh, ow) = window_output("maxpool2d", h, w, k, stride, padding)?;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let p = padding as isize;
    for plane in input.data.chunks_exact(h * w) {
        for y in 0..oh {
            let y0 = (y * stride) as isize - p;
            let ys = y0.max(0) as usize..((y0 + k as isize).min(h as isize)).max(0) as usize;
            for x in 0..ow {
                let x0 = (x * stride) as isize - p;
                let xs = x0.max(0) as usize..((x0 + k as isize).min(w as isize)).max(0) as usize;
                let mut m = f32::NEG_INFINITY;
                for yy in ys.clone() {
                    for &v in &plane[yy * w + xs.start..yy * w + xs.end] {
                        if v > m {
                            m = v;
                        }
                    }
                }
                out.push(m);
            }
        }
    }
    Tensor::new([n, c, oh, ow], out)
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu_scalar(x: f32) -> f32 {
    x * sigmoid(x)
}

/// Elementwise `x * sigmoid(x)`.
pub fn silu(input: &Tensor) -> Tensor {
    input.map(silu_scalar)
}

pub(crate) fn silu_inplace(t: &mut Tensor) {
    for v in &mut t.data {
        *v = silu_scalar(*v);
    }
}

/// Folds inference-mode batch norm into the preceding convolution:
/// `w' = w * g / sqrt(var + eps)` and `b' = (b - mean) * g / sqrt(var + eps) + beta`.
pub fn fold_batchnorm(conv: &ConvParams, bn: &BnParams) -> Result<ConvParams, TensorError> {
    conv.validate()?;
    bn.validate()?;
    check_dim("fold_batchnorm", "channels", conv.out_channels, bn.channels())?;
    let flen = conv.filter_len();
    let mut folded = conv.clone();
    for o in 0..conv.out_channels {
        let scale = bn.gamma[o] / (bn.running_var[o] + bn.epsilon).sqrt();
        for wv in &mut folded.weights[o * flen..(o + 1) * flen] {
            *wv *= scale;
        }
        folded.bias[o] = (conv.bias[o] - bn.running_mean[o]) * scale + bn.beta[o];
    }
    Ok(folded)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2x(input: &Tensor) -> Tensor {
    let [n, c, h, w] = input.shape();
    let mut data = Vec::with_capacity(n * c * 4 * h * w);
    for plane in input.data.chunks_exact(h * w) {
        for row in plane.chunks_exact(w) {
            for _ in 0..2 {
                for &v in row {
                    data.push(v);
                    data.push(v);
                }
            }
        }
    }
    Tensor {
        shape: [n, c, 2 * h, 2 * w],
        data,
    }
}

/// Concatenates along the channel axis, preserving part order.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::invalid("concat_channels", "no inputs"))?;
    let [n, _, h, w] = first.shape();
    for p in parts {
        check_dim("concat_channels", "batch", n, p.batch())?;
        check_dim("concat_channels", "height", h, p.height())?;
        check_dim("concat_channels", "width", w, p.width())?;
    }
    let c: usize = parts.iter().map(|p| p.channels()).sum();
    let hw = h * w;
    let mut data = Vec::with_capacity(n * c * hw);
    for b in 0..n {
        for p in parts {
            let pc = p.channels();
            data.extend_from_slice(&p.data[b * pc * hw..(b + 1) * pc * hw]);
        }
    }
    Ok(Tensor {
        shape: [n, c, h, w],
        data,
    })
}

/// Elementwise sum.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let names = ["batch", "channels", "height", "width"];
    for (i, name) in names.iter().enumerate() {
        check_dim("add", name, a.shape[i], b.shape[i])?;
    }
    Ok(Tensor {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}
