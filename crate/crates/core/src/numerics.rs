//! Dense `f64` array kernel.
//!
//! Only what the prunable networks need: matrix products, 2-D convolution
//! (cross-correlation), batch normalization, ReLU, softmax cross-entropy,
//! reductions and deterministic top-k selection. Everything is row-major
//! and 64-bit.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Contiguous row-major array of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the leading axis.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of values per leading-axis item.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            s => Err(Error::shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Flattens every axis after the first.
    pub fn flatten_items(self) -> Self {
        let n = self.shape[0];
        let w = self.row_len();
        Self {
            shape: vec![n, w],
            data: self.data,
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Gathers items along the leading axis.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("empty row selection"));
        }
        let w = self.row_len();
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= self.rows() {
                return Err(Error::invalid(format!(
                    "row {i} out of range for {} rows",
                    self.rows()
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self { shape, data })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `c = a * b` with explicit strides; `c` is written row-major `m x n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert_eq!(c.len(), m * n);
    if k == 0 {
        c.fill(0.0);
        return;
    }
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a[m x k] * b[k x n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims()?;
    let (k2, n) = b.matrix_dims()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dims differ: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, (k, 1), &b.data, (n, 1), &mut out);
    Tensor::new(vec![m, n], out)
}

/// `a^T * b` for `a[k x m]`, `b[k x n]`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.matrix_dims()?;
    let (k2, n) = b.matrix_dims()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul_tn leading dims differ: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, (1, m), &b.data, (n, 1), &mut out);
    Tensor::new(vec![m, n], out)
}

/// `a * b^T` for `a[m x k]`, `b[n x k]`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims()?;
    let (n, k2) = b.matrix_dims()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul_nt trailing dims differ: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, &a.data, (k, 1), &b.data, (1, k), &mut out);
    Tensor::new(vec![m, n], out)
}

/// Output extent of a convolution along one axis. The stride has to divide
/// the padded span exactly.
pub fn conv_output_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::invalid("stride must be positive"));
    }
    let padded = size + 2 * padding;
    if kernel == 0 || kernel > padded {
        return Err(Error::shape(format!(
            "kernel {kernel} does not fit padded extent {padded}"
        )));
    }
    let span = padded - kernel;
    if span % stride != 0 {
        return Err(Error::shape(format!(
            "output extent ({size}+2*{padding}-{kernel})/{stride}+1 is not integral"
        )));
    }
    Ok(span / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeometry {
    fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let (&[n, c, h, w], &[o, kc, kh, kw]) = (input, kernel) else {
            return Err(Error::shape(format!(
                "conv2d expects NCHW input and OCHW kernel, got {input:?} and {kernel:?}"
            )));
        };
        if c != kc {
            return Err(Error::shape(format!(
                "input has {c} channels, kernel expects {kc}"
            )));
        }
        let oh = conv_output_extent(h, kh, stride, padding)?;
        let ow = conv_output_extent(w, kw, stride, padding)?;
        Ok(Self {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        })
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate hit by output `(oy, ox)` and kernel tap `(ki, kj)`,
    /// or `None` when it lands in the padding.
    fn source(&self, oy: usize, ox: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ki).checked_sub(self.padding)?;
        let x = (ox * self.stride + kj).checked_sub(self.padding)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

/// Patch matrix `[C*kh*kw, N*OH*OW]`.
fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let cols = g.n * g.positions();
    let mut out = vec![0.0; g.patch_len() * cols];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let row = &mut out[r * cols..(r + 1) * cols];
                for n in 0..g.n {
                    let plane = &input[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        for ox in 0..g.ow {
                            if let Some((y, x)) = g.source(oy, ox, ki, kj) {
                                row[(n * g.oh + oy) * g.ow + ox] = plane[y * g.w + x];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let ncols = g.n * g.positions();
    let mut out = vec![0.0; g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let r = (c * g.kh + ki) * g.kw + kj;
                let row = &cols[r * ncols..(r + 1) * ncols];
                for n in 0..g.n {
                    let plane = &mut out[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        for ox in 0..g.ow {
                            if let Some((y, x)) = g.source(oy, ox, ki, kj) {
                                plane[y * g.w + x] += row[(n * g.oh + oy) * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2-D cross-correlation of `input[N,C,H,W]` with `kernel[O,C,kh,kw]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(&input.shape, &kernel.shape, stride, padding)?;
    let cols = im2col(&input.data, &g);
    let np = g.n * g.positions();
    let mut prod = vec![0.0; g.o * np];
    gemm(
        g.o,
        g.patch_len(),
        np,
        &kernel.data,
        (g.patch_len(), 1),
        &cols,
        (np, 1),
        &mut prod,
    );
    // [O, N, P] -> [N, O, P]
    let p = g.positions();
    let mut out = vec![0.0; g.n * g.o * p];
    for o in 0..g.o {
        for n in 0..g.n {
            out[(n * g.o + o) * p..][..p].copy_from_slice(&prod[(o * g.n + n) * p..][..p]);
        }
    }
    Tensor::new(vec![g.n, g.o, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`] with respect to its input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_output: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<(Tensor, Tensor)> {
    let g = ConvGeometry::new(&input.shape, &kernel.shape, stride, padding)?;
    if grad_output.shape != [g.n, g.o, g.oh, g.ow] {
        return Err(Error::shape(format!(
            "conv2d grad_output {:?} does not match output [{}, {}, {}, {}]",
            grad_output.shape, g.n, g.o, g.oh, g.ow
        )));
    }
    let p = g.positions();
    let np = g.n * p;
    let mut gout = vec![0.0; g.o * np];
    for n in 0..g.n {
        for o in 0..g.o {
            gout[(o * g.n + n) * p..][..p].copy_from_slice(&grad_output.data[(n * g.o + o) * p..][..p]);
        }
    }
    let cols = im2col(&input.data, &g);
    let kl = g.patch_len();
    let mut grad_kernel = vec![0.0; g.o * kl];
    gemm(g.o, np, kl, &gout, (np, 1), &cols, (1, np), &mut grad_kernel);
    let mut grad_cols = vec![0.0; kl * np];
    gemm(kl, g.o, np, &kernel.data, (1, kl), &gout, (np, 1), &mut grad_cols);
    let grad_input = col2im(&grad_cols, &g);
    Ok((
        Tensor::new(input.shape.clone(), grad_input)?,
        Tensor::new(kernel.shape.clone(), grad_kernel)?,
    ))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Passes `grad` where the pre-activation was positive.
pub fn relu_backward(pre_activation: &Tensor, grad: &Tensor) -> Tensor {
    let data = pre_activation
        .data
        .iter()
        .zip(&grad.data)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor {
        shape: grad.shape.clone(),
        data,
    }
}

/// Per-channel moments of a batch, reduced over every axis except axis 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMoments {
    pub mean: Vec<f64>,
    /// Population (biased) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    match shape {
        &[n, c] => Ok((n, c, 1)),
        &[n, c, h, w] => Ok((n, c, h * w)),
        s => Err(Error::shape(format!(
            "batch norm expects [N,C] or [N,C,H,W], got {s:?}"
        ))),
    }
}

/// Two-pass mean and population variance per channel.
pub fn channel_moments(x: &Tensor) -> Result<ChannelMoments> {
    let (n, c, s) = channel_layout(&x.shape)?;
    let count = n * s;
    let mut mean = vec![0.0; c];
    for i in 0..n {
        for (ch, m) in mean.iter_mut().enumerate() {
            *m += x.data[(i * c + ch) * s..][..s].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0; c];
    for i in 0..n {
        for ch in 0..c {
            var[ch] += x.data[(i * c + ch) * s..][..s]
                .iter()
                .map(|v| (v - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    Ok(ChannelMoments { mean, var, count })
}

/// Running statistics used for inference-time normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Exponential moving average toward a batch's moments.
    pub fn update(&mut self, batch: &ChannelMoments, momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Pools per-batch moments into exact whole-set moments (Chan et al.'s
/// parallel update), so unequal batch sizes are weighted correctly.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl MomentAccumulator {
    pub fn new(channels: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; channels],
            m2: vec![0.0; channels],
        }
    }

    pub fn push(&mut self, batch: &ChannelMoments) {
        let na = self.count as f64;
        let nb = batch.count as f64;
        let total = na + nb;
        for ch in 0..self.mean.len() {
            let delta = batch.mean[ch] - self.mean[ch];
            self.mean[ch] += delta * nb / total;
            self.m2[ch] += batch.var[ch] * nb + delta * delta * na * nb / total;
        }
        self.count += batch.count;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self) -> RunningStats {
        let n = self.count.max(1) as f64;
        RunningStats {
            mean: self.mean.clone(),
            var: self.m2.iter().map(|m| (m / n).max(0.0)).collect(),
        }
    }
}

/// Learnable affine part of a batch-norm layer plus its hyper-parameters.
/// Running statistics live outside, keyed by capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let dims = channel_layout(&x.shape)?;
        if dims.1 != self.channels() {
            return Err(Error::shape(format!(
                "batch norm has {} channels, input {:?}",
                self.channels(),
                x.shape
            )));
        }
        Ok(dims)
    }

    fn apply(&self, x: &Tensor, mean: &[f64], var: &[f64]) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let (n, c, s) = self.check(x)?;
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = vec![0.0; x.len()];
        let mut y = vec![0.0; x.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for k in base..base + s {
                    let h = (x.data[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = h;
                    y[k] = self.gamma[ch] * h + self.beta[ch];
                }
            }
        }
        Ok((Tensor::new(x.shape.clone(), y)?, xhat, inv_std))
    }

    /// Normalizes with the batch's own statistics.
    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, BatchNormCache, ChannelMoments)> {
        self.check(x)?;
        let moments = channel_moments(x)?;
        let (y, xhat, inv_std) = self.apply(x, &moments.mean, &moments.var)?;
        let cache = BatchNormCache {
            xhat,
            inv_std,
            shape: x.shape.clone(),
        };
        Ok((y, cache, moments))
    }

    pub fn forward_eval(&self, x: &Tensor, stats: &RunningStats) -> Result<Tensor> {
        if stats.channels() != self.channels() {
            return Err(Error::shape(format!(
                "running stats have {} channels, layer has {}",
                stats.channels(),
                self.channels()
            )));
        }
        Ok(self.apply(x, &stats.mean, &stats.var)?.0)
    }

    /// Returns `(grad_input, grad_gamma, grad_beta)`.
    pub fn backward(
        &self,
        cache: &BatchNormCache,
        grad_y: &Tensor,
    ) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        if grad_y.shape != cache.shape {
            return Err(Error::shape("batch norm grad does not match cached input"));
        }
        let (n, c, s) = self.check(grad_y)?;
        let m = (n * s) as f64;
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                for k in base..base + s {
                    dgamma[ch] += grad_y.data[k] * cache.xhat[k];
                    dbeta[ch] += grad_y.data[k];
                }
            }
        }
        let mut dx = vec![0.0; grad_y.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * s;
                let scale = self.gamma[ch] * cache.inv_std[ch] / m;
                for k in base..base + s {
                    dx[k] = scale * (m * grad_y.data[k] - dbeta[ch] - cache.xhat[k] * dgamma[ch]);
                }
            }
        }
        Ok((Tensor::new(grad_y.shape.clone(), dx)?, dgamma, dbeta))
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)` and its
/// gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = logits.matrix_dims()?;
    if labels.len() != n {
        return Err(Error::shape(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::invalid(format!("label {label} outside [0, {k})")));
        }
        let row = &logits.data[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_sum = max + sum.ln();
        loss += log_sum - row[label];
        for (j, &z) in row.iter().enumerate() {
            let p = (z - log_sum).exp();
            grad[i * k + j] = (p - if j == label { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, Tensor::new(vec![n, k], grad)?))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Norms below this are treated as zero vectors.
pub const ZERO_NORM: f64 = 1e-12;

/// Cosine of the angle between `a` and `b`; zero when either is (near) zero.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na < ZERO_NORM || nb < ZERO_NORM {
        return Ok(0.0);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Number of entries kept at `keep_fraction`: `ceil(fraction * len)`.
///
/// The product is nudged down by a relative `1e-9` before rounding up so
/// that fractions such as `0.6 * 5` that land a hair above an integer in
/// binary floating point keep the intended count.
pub fn keep_count(len: usize, keep_fraction: f64) -> Result<usize> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Capacity(keep_fraction));
    }
    if len == 0 {
        return Err(Error::invalid("top-k over an empty score set"));
    }
    let raw = keep_fraction * len as f64;
    let k = (raw - 1e-9 * raw.max(1.0)).ceil() as usize;
    Ok(k.clamp(1, len))
}

/// Total order used for selection: higher score first, lower flat index
/// first among equal scores.
fn rank_cmp(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Indices sorted by descending score, ties by ascending index. Every top-k
/// selection is a prefix of this order, which is what makes masks nest.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_unstable_by(|&a, &b| rank_cmp(scores, a, b));
    idx
}

/// Like [`rank_order`] but only over `eligible` entries.
pub fn rank_order_within(scores: &[f64], eligible: &[bool]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| eligible[i]).collect();
    idx.sort_unstable_by(|&a, &b| rank_cmp(scores, a, b));
    idx
}

/// Score of the last entry admitted at `keep_fraction`. Entries strictly
/// above it are all kept; entries equal to it are admitted by ascending
/// index until the count `ceil(fraction * len)` is reached.
pub fn topk_threshold(scores: &[f64], keep_fraction: f64) -> Result<f64> {
    let k = keep_count(scores.len(), keep_fraction)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let (_, nth, _) = idx.select_nth_unstable_by(k - 1, |&a, &b| rank_cmp(scores, a, b));
    Ok(scores[*nth])
}

/// Boolean selection of the top `ceil(fraction * len)` scores.
pub fn topk_select(scores: &[f64], keep_fraction: f64) -> Result<Vec<bool>> {
    let k = keep_count(scores.len(), keep_fraction)?;
    let mut keep = vec![false; scores.len()];
    if k == scores.len() {
        keep.fill(true);
        return Ok(keep);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.select_nth_unstable_by(k - 1, |&a, &b| rank_cmp(scores, a, b));
    for &i in &idx[..k] {
        keep[i] = true;
    }
    Ok(keep)
}

/// Index of the largest entry of each row; ties go to the lower index.
pub fn argmax_rows(x: &Tensor) -> Vec<usize> {
    (0..x.rows())
        .map(|i| {
            let row = x.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Scales each row to unit L2 norm; zero rows stay zero.
pub fn l2_normalize_rows(x: &Tensor) -> Tensor {
    let w = x.row_len();
    let mut out = x.clone();
    for row in out.data.chunks_mut(w) {
        let n = l2_norm(row);
        if n >= ZERO_NORM {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}
