//! Layers whose connections carry a learnable importance score.
//!
//! A subnetwork at capacity `c` keeps, in every layer, the `ceil(c * n)`
//! connections with the highest scores (ties go to the lower flat index)
//! and evaluates the layer with the other weights zeroed. In the backward
//! pass the selection is treated as the identity, so scores receive
//! `dL/dI * w * z`; with filtering enabled that gradient is then masked to
//! the connections the subnetwork actually used.
//!
//! Biases are never pruned and are shared by all capacities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Tensor};

/// A weight tensor with a same-shape score tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTensor {
    pub weight: Tensor,
    pub score: Tensor,
}

impl ScoredTensor {
    pub fn new(weight: Tensor, score: Tensor) -> Result<Self> {
        if weight.shape() != score.shape() {
            return Err(Error::shape(format!(
                "weight {:?} and score {:?} differ",
                weight.shape(),
                score.shape()
            )));
        }
        if !weight.all_finite() || !score.all_finite() {
            return Err(Error::NonFinite("scored tensor".into()));
        }
        Ok(Self { weight, score })
    }

    /// Kaiming-uniform weights and independent `|Kaiming-uniform|` scores.
    pub fn kaiming<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let weight: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        let score: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound).abs()).collect();
        Self {
            weight: Tensor::new(shape.to_vec(), weight).expect("shape product"),
            score: Tensor::new(shape.to_vec(), score).expect("shape product"),
        }
    }

    pub fn len(&self) -> usize {
        self.weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weight.is_empty()
    }

    pub fn shape(&self) -> &[usize] {
        self.weight.shape()
    }
}

/// Binary keep-mask of one layer at one capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityMask {
    capacity: f64,
    shape: Vec<usize>,
    bits: Vec<bool>,
}

impl CapacityMask {
    pub fn from_bits(capacity: f64, shape: Vec<usize>, bits: Vec<bool>) -> Result<Self> {
        if !(capacity > 0.0 && capacity <= 1.0) {
            return Err(Error::Capacity(capacity));
        }
        if shape.iter().product::<usize>() != bits.len() {
            return Err(Error::shape(format!(
                "mask of {} bits for shape {shape:?}",
                bits.len()
            )));
        }
        Ok(Self {
            capacity,
            shape,
            bits,
        })
    }

    pub fn full(shape: &[usize]) -> Self {
        Self {
            capacity: 1.0,
            shape: shape.to_vec(),
            bits: vec![true; shape.iter().product()],
        }
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Flat indices kept here but dropped by `larger`.
    pub fn violations_against(&self, larger: &CapacityMask) -> Vec<usize> {
        self.bits
            .iter()
            .zip(&larger.bits)
            .enumerate()
            .filter(|(_, (&a, &b))| a && !b)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_subset_of(&self, larger: &CapacityMask) -> bool {
        self.bits.len() == larger.bits.len() && self.violations_against(larger).is_empty()
    }

    /// `weight` with every dropped entry replaced by `0.0`.
    pub fn apply(&self, weight: &Tensor) -> Result<Tensor> {
        if weight.shape() != self.shape.as_slice() {
            return Err(Error::shape(format!(
                "mask {:?} applied to weight {:?}",
                self.shape,
                weight.shape()
            )));
        }
        let data = weight
            .data()
            .iter()
            .zip(&self.bits)
            .map(|(&w, &keep)| if keep { w } else { 0.0 })
            .collect();
        Tensor::new(weight.shape().to_vec(), data)
    }
}

fn mask_from_order(capacity: f64, shape: &[usize], order: &[usize], k: usize) -> CapacityMask {
    let mut bits = vec![false; order.len().max(shape.iter().product())];
    for &i in &order[..k] {
        bits[i] = true;
    }
    CapacityMask {
        capacity,
        shape: shape.to_vec(),
        bits,
    }
}

/// Per-layer top-k mask of `layer`'s scores at `capacity`.
pub fn build_mask(layer: &ScoredTensor, capacity: f64) -> Result<CapacityMask> {
    let keep = numerics::topk_select(layer.score.data(), capacity)?;
    CapacityMask::from_bits(capacity, layer.shape().to_vec(), keep)
}

/// Masks for several capacities from a single ranking of the scores.
pub fn build_masks(layer: &ScoredTensor, capacities: &[f64]) -> Result<Vec<CapacityMask>> {
    let n = layer.len();
    let counts = capacities
        .iter()
        .map(|&c| numerics::keep_count(n, c))
        .collect::<Result<Vec<_>>>()?;
    if counts.iter().all(|&k| k == n) {
        return Ok(capacities.iter().map(|_| CapacityMask::full(layer.shape())).collect());
    }
    let order = numerics::rank_order(layer.score.data());
    Ok(capacities
        .iter()
        .zip(counts)
        .map(|(&c, k)| mask_from_order(c, layer.shape(), &order, k))
        .collect())
}

/// Top-k restricted to the connections `eligible` keeps. The count is still
/// `ceil(capacity * n)` over the whole layer.
pub fn build_mask_within(
    layer: &ScoredTensor,
    capacity: f64,
    eligible: &CapacityMask,
) -> Result<CapacityMask> {
    if eligible.shape() != layer.shape() {
        return Err(Error::shape("eligibility mask does not match layer"));
    }
    let k = numerics::keep_count(layer.len(), capacity)?;
    let order = numerics::rank_order_within(layer.score.data(), eligible.bits());
    if order.len() < k {
        return Err(Error::invalid(format!(
            "capacity {capacity} needs {k} connections but only {} are eligible",
            order.len()
        )));
    }
    Ok(mask_from_order(capacity, layer.shape(), &order, k))
}

/// Whether masked-out connections also have their score gradient zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreGradient {
    /// Score gradient multiplied by the mask (compatible training).
    Filtered,
    /// Pure straight-through: every score gets `dL/dI * w * z`.
    Unfiltered,
}

/// Saved forward state: the layer input `Z`, the output `I` and the
/// capacity of the mask used.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Tensor,
    pre_activation: Tensor,
    capacity: f64,
}

impl ForwardCache {
    pub fn input(&self) -> &Tensor {
        &self.input
    }

    pub fn pre_activation(&self) -> &Tensor {
        &self.pre_activation
    }

    pub fn into_pre_activation(self) -> Tensor {
        self.pre_activation
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }
}

#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weight: Tensor,
    pub score: Tensor,
    pub bias: Vec<f64>,
    pub input: Tensor,
}

/// Combines the dense connection gradient `G = sum dL/dI * z` into weight and
/// score gradients.
fn split_connection_grad(
    param: &ScoredTensor,
    mask: &CapacityMask,
    dense: &Tensor,
    score_mode: ScoreGradient,
) -> Result<(Tensor, Tensor)> {
    let mut gw = dense.data().to_vec();
    let mut gs: Vec<f64> = dense
        .data()
        .iter()
        .zip(param.weight.data())
        .map(|(g, w)| g * w)
        .collect();
    for (i, &keep) in mask.bits().iter().enumerate() {
        if !keep {
            gw[i] = 0.0;
            if score_mode == ScoreGradient::Filtered {
                gs[i] = 0.0;
            }
        }
    }
    Ok((
        Tensor::new(param.shape().to_vec(), gw)?,
        Tensor::new(param.shape().to_vec(), gs)?,
    ))
}

fn check_mask(param: &ScoredTensor, mask: &CapacityMask) -> Result<()> {
    if mask.shape() != param.shape() {
        return Err(Error::shape(format!(
            "mask {:?} for layer {:?}",
            mask.shape(),
            param.shape()
        )));
    }
    Ok(())
}

fn check_cache(cache: &ForwardCache, mask: &CapacityMask, grad_output: &Tensor) -> Result<()> {
    if cache.capacity != mask.capacity() {
        return Err(Error::shape(format!(
            "cache from capacity {} used with mask of capacity {}",
            cache.capacity,
            mask.capacity()
        )));
    }
    if cache.pre_activation.shape() != grad_output.shape() {
        return Err(Error::shape(format!(
            "grad_output {:?} does not match forward output {:?}",
            grad_output.shape(),
            cache.pre_activation.shape()
        )));
    }
    Ok(())
}

/// Fully connected layer, weight `[out, in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunableLinear {
    pub param: ScoredTensor,
    pub bias: Vec<f64>,
}

impl PrunableLinear {
    pub fn new(param: ScoredTensor, bias: Vec<f64>) -> Result<Self> {
        let (out, _) = param.weight.matrix_dims()?;
        if bias.len() != out {
            return Err(Error::shape(format!("{} biases for {out} outputs", bias.len())));
        }
        Ok(Self { param, bias })
    }

    pub fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            param: ScoredTensor::kaiming(&[outputs, inputs], inputs, rng),
            bias: vec![0.0; outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.param.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.param.shape()[0]
    }

    /// `input * weight^T + bias` for an explicit (already masked) weight.
    pub fn forward_with_weight(weight: &Tensor, bias: &[f64], input: &Tensor) -> Result<Tensor> {
        let mut out = numerics::matmul_nt(input, weight)?;
        let width = bias.len();
        for row in out.data_mut().chunks_mut(width) {
            row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
        }
        Ok(out)
    }

    pub fn forward_masked(&self, mask: &CapacityMask, input: &Tensor) -> Result<(Tensor, ForwardCache)> {
        check_mask(&self.param, mask)?;
        let weight = mask.apply(&self.param.weight)?;
        let out = Self::forward_with_weight(&weight, &self.bias, input)?;
        let cache = ForwardCache {
            input: input.clone(),
            pre_activation: out.clone(),
            capacity: mask.capacity(),
        };
        Ok((out, cache))
    }

    pub fn backward_masked(
        &self,
        mask: &CapacityMask,
        cache: &ForwardCache,
        grad_output: &Tensor,
    ) -> Result<LayerGrads> {
        self.backward_masked_with(mask, cache, grad_output, ScoreGradient::Filtered)
    }

    pub fn backward_masked_with(
        &self,
        mask: &CapacityMask,
        cache: &ForwardCache,
        grad_output: &Tensor,
        score_mode: ScoreGradient,
    ) -> Result<LayerGrads> {
        check_mask(&self.param, mask)?;
        check_cache(cache, mask, grad_output)?;
        let dense = numerics::matmul_tn(grad_output, &cache.input)?;
        let (weight, score) = split_connection_grad(&self.param, mask, &dense, score_mode)?;
        let masked = mask.apply(&self.param.weight)?;
        let input = numerics::matmul(grad_output, &masked)?;
        let mut bias = vec![0.0; self.outputs()];
        for row in grad_output.data().chunks(self.outputs()) {
            bias.iter_mut().zip(row).for_each(|(b, g)| *b += g);
        }
        Ok(LayerGrads {
            weight,
            score,
            bias,
            input,
        })
    }
}

/// 2-D convolution, weight `[out_channels, in_channels, kh, kw]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunableConv2d {
    pub param: ScoredTensor,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
}

impl PrunableConv2d {
    pub fn init<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Self {
            param: ScoredTensor::kaiming(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: vec![0.0; out_channels],
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.param.shape()[0]
    }

    /// Values per output kernel (`in_channels * kh * kw`).
    pub fn kernel_len(&self) -> usize {
        self.param.len() / self.out_channels()
    }

    pub fn forward_with_weight(
        weight: &Tensor,
        bias: &[f64],
        stride: usize,
        padding: usize,
        input: &Tensor,
    ) -> Result<Tensor> {
        let mut out = numerics::conv2d(input, weight, stride, padding)?;
        let plane: usize = out.shape()[2..].iter().product();
        let channels = bias.len();
        for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let b = bias[i % channels];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Ok(out)
    }

    pub fn forward_masked(&self, mask: &CapacityMask, input: &Tensor) -> Result<(Tensor, ForwardCache)> {
        check_mask(&self.param, mask)?;
        let weight = mask.apply(&self.param.weight)?;
        let out = Self::forward_with_weight(&weight, &self.bias, self.stride, self.padding, input)?;
        let cache = ForwardCache {
            input: input.clone(),
            pre_activation: out.clone(),
            capacity: mask.capacity(),
        };
        Ok((out, cache))
    }

    pub fn backward_masked_with(
        &self,
        mask: &CapacityMask,
        cache: &ForwardCache,
        grad_output: &Tensor,
        score_mode: ScoreGradient,
    ) -> Result<LayerGrads> {
        check_mask(&self.param, mask)?;
        check_cache(cache, mask, grad_output)?;
        let masked = mask.apply(&self.param.weight)?;
        let (input, dense) =
            numerics::conv2d_backward(&cache.input, &masked, grad_output, self.stride, self.padding)?;
        let (weight, score) = split_connection_grad(&self.param, mask, &dense, score_mode)?;
        let plane: usize = grad_output.shape()[2..].iter().product();
        let channels = self.out_channels();
        let mut bias = vec![0.0; channels];
        for (i, chunk) in grad_output.data().chunks(plane).enumerate() {
            bias[i % channels] += chunk.iter().sum::<f64>();
        }
        Ok(LayerGrads {
            weight,
            score,
            bias,
            input,
        })
    }

    /// Mean score of each output kernel.
    pub fn kernel_scores(&self) -> Vec<f64> {
        let len = self.kernel_len();
        self.param
            .score
            .data()
            .chunks(len)
            .map(|k| k.iter().sum::<f64>() / len as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PrunableLayer {
    Linear(PrunableLinear),
    Conv(PrunableConv2d),
}

impl PrunableLayer {
    pub fn param(&self) -> &ScoredTensor {
        match self {
            PrunableLayer::Linear(l) => &l.param,
            PrunableLayer::Conv(c) => &c.param,
        }
    }

    pub fn param_mut(&mut self) -> &mut ScoredTensor {
        match self {
            PrunableLayer::Linear(l) => &mut l.param,
            PrunableLayer::Conv(c) => &mut c.param,
        }
    }

    pub fn bias(&self) -> &[f64] {
        match self {
            PrunableLayer::Linear(l) => &l.bias,
            PrunableLayer::Conv(c) => &c.bias,
        }
    }

    pub fn bias_mut(&mut self) -> &mut Vec<f64> {
        match self {
            PrunableLayer::Linear(l) => &mut l.bias,
            PrunableLayer::Conv(c) => &mut c.bias,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, PrunableLayer::Conv(_))
    }

    /// Length of one gradient-integration block: a whole linear layer or a
    /// single output kernel of a convolution.
    pub fn block_len(&self) -> usize {
        match self {
            PrunableLayer::Linear(l) => l.param.len(),
            PrunableLayer::Conv(c) => c.kernel_len(),
        }
    }

    /// Forward with an explicit effective weight (used by both the masked
    /// and the sparse-artifact paths so they share one op order).
    pub fn forward_with_weight(&self, weight: &Tensor, input: &Tensor) -> Result<Tensor> {
        match self {
            PrunableLayer::Linear(l) => PrunableLinear::forward_with_weight(weight, &l.bias, input),
            PrunableLayer::Conv(c) => {
                PrunableConv2d::forward_with_weight(weight, &c.bias, c.stride, c.padding, input)
            }
        }
    }

    pub fn forward_masked(&self, mask: &CapacityMask, input: &Tensor) -> Result<(Tensor, ForwardCache)> {
        match self {
            PrunableLayer::Linear(l) => l.forward_masked(mask, input),
            PrunableLayer::Conv(c) => c.forward_masked(mask, input),
        }
    }

    pub fn backward_masked(
        &self,
        mask: &CapacityMask,
        cache: &ForwardCache,
        grad_output: &Tensor,
        score_mode: ScoreGradient,
    ) -> Result<LayerGrads> {
        match self {
            PrunableLayer::Linear(l) => l.backward_masked_with(mask, cache, grad_output, score_mode),
            PrunableLayer::Conv(c) => c.backward_masked_with(mask, cache, grad_output, score_mode),
        }
    }
}

/// One aggregated score per output kernel of a convolutional layer.
pub fn structured_scores(layer: &PrunableLayer) -> Result<Vec<f64>> {
    match layer {
        PrunableLayer::Conv(c) => Ok(c.kernel_scores()),
        PrunableLayer::Linear(_) => Err(Error::invalid(
            "kernel-level scores need a convolutional layer",
        )),
    }
}

/// Element mask that keeps the top `ceil(capacity * kernels)` whole kernels
/// ranked by mean score.
pub fn build_kernel_mask(layer: &PrunableLayer, capacity: f64) -> Result<CapacityMask> {
    let kernel_scores = structured_scores(layer)?;
    let keep = numerics::topk_select(&kernel_scores, capacity)?;
    let len = layer.block_len();
    let bits = keep
        .iter()
        .flat_map(|&k| std::iter::repeat(k).take(len))
        .collect();
    CapacityMask::from_bits(capacity, layer.param().shape().to_vec(), bits)
}
