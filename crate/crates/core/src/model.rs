//! Prunable network: a stack of prunable layers (each followed by optional
//! batch norm and ReLU), an unpruned embedding head and an unpruned
//! classifier. Normalization affine parameters and biases are shared by all
//! capacities; running statistics are stored per capacity.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, BatchNorm, BatchNormCache, ChannelMoments, RunningStats, Tensor};
use crate::prunable::{
    self, CapacityMask, ForwardCache, PrunableConv2d, PrunableLayer, PrunableLinear, ScoreGradient,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Linear {
        out: usize,
    },
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Per-item input shape `[C, H, W]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub batch_norm: bool,
    pub embedding_dim: usize,
    pub num_classes: usize,
}

impl ArchSpec {
    /// Fully connected backbone over flattened inputs.
    pub fn mlp(input: [usize; 3], hidden: &[usize], embedding_dim: usize, num_classes: usize) -> Self {
        Self {
            input,
            layers: hidden.iter().map(|&out| LayerSpec::Linear { out }).collect(),
            batch_norm: true,
            embedding_dim,
            num_classes,
        }
    }

    /// Output shape (without the batch axis) of every backbone layer.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("input shape {:?} has a zero extent", self.input)));
        }
        if self.layers.is_empty() {
            return Err(Error::invalid("backbone needs at least one prunable layer"));
        }
        if self.embedding_dim == 0 || self.num_classes < 2 {
            return Err(Error::invalid("embedding_dim must be >= 1 and num_classes >= 2"));
        }
        let mut current = self.input.to_vec();
        let mut shapes = Vec::new();
        for (i, spec) in self.layers.iter().enumerate() {
            current = match *spec {
                LayerSpec::Linear { out } if out > 0 => vec![out],
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } if out_channels > 0 && kernel > 0 && stride > 0 => {
                    if current.len() != 3 {
                        return Err(Error::invalid(format!("conv layer {i} follows a linear layer")));
                    }
                    vec![
                        out_channels,
                        numerics::conv_output_extent(current[1], kernel, stride, padding)?,
                        numerics::conv_output_extent(current[2], kernel, stride, padding)?,
                    ]
                }
                _ => return Err(Error::invalid(format!("layer {i} has a zero extent"))),
            };
            shapes.push(current.clone());
        }
        Ok(shapes)
    }

    pub fn has_conv(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, LayerSpec::Conv { .. }))
    }
}

/// Capacity rounded to millionths, used as the running-stats key.
pub fn capacity_key(capacity: f64) -> u32 {
    (capacity * 1e6).round() as u32
}

pub const DENSE_KEY: u32 = 1_000_000;

/// Plain (unpruned) linear layer, weight `[out, in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLinear {
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl DenseLinear {
    /// Uniform in `+-sqrt(3 / fan_in)`, zero bias.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (3.0 / inputs as f64).sqrt();
        let data = (0..inputs * outputs).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            weight: Tensor::new(vec![outputs, inputs], data).expect("shape product"),
            bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        PrunableLinear::forward_with_weight(&self.weight, &self.bias, input)
    }

    /// Returns `(grad_weight, grad_bias, grad_input)`.
    fn backward(&self, input: &Tensor, grad: &Tensor) -> Result<(Tensor, Vec<f64>, Tensor)> {
        let gw = numerics::matmul_tn(grad, input)?;
        let outputs = self.bias.len();
        let mut gb = vec![0.0; outputs];
        for row in grad.data().chunks(outputs) {
            gb.iter_mut().zip(row).for_each(|(b, g)| *b += g);
        }
        let gx = numerics::matmul(grad, &self.weight)?;
        Ok((gw, gb, gx))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Weight,
    Score,
    Bias,
    NormScale,
    NormShift,
    HeadWeight,
    HeadBias,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub role: ParamRole,
    /// Backbone layer index; `None` for the heads.
    pub layer: Option<usize>,
    pub shape: Vec<usize>,
    /// Integration block length; divides the parameter length.
    pub block_len: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How batch norm normalizes during a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    /// Per-batch statistics (training and recalibration).
    Batch,
    /// Stored statistics, one entry per backbone layer.
    Running(&'a [RunningStats]),
}

/// Everything a backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    layer_caches: Vec<ForwardCache>,
    norm_caches: Vec<BatchNormCache>,
    /// Input of each ReLU.
    post_norm: Vec<Tensor>,
    /// Per-layer pre-normalization moments (batch mode with batch norm only).
    pub moments: Vec<ChannelMoments>,
    backbone_shape: Vec<usize>,
    features: Tensor,
    pub embedding: Tensor,
    pub logits: Tensor,
}

impl ForwardTrace {
    /// Pre-normalization activation of a backbone layer.
    pub fn pre_norm(&self, layer: usize) -> &Tensor {
        self.layer_caches[layer].pre_activation()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunableModel {
    pub arch: ArchSpec,
    pub layers: Vec<PrunableLayer>,
    /// One per backbone layer when the architecture uses batch norm.
    pub norms: Vec<BatchNorm>,
    pub embedding: DenseLinear,
    pub classifier: DenseLinear,
    /// Running statistics keyed by [`capacity_key`].
    pub bn_stats: BTreeMap<u32, Vec<RunningStats>>,
}

impl PrunableModel {
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<Self> {
        let shapes = arch.layer_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut current = arch.input.to_vec();
        let mut layers = Vec::new();
        for (spec, shape) in arch.layers.iter().zip(&shapes) {
            let layer = match *spec {
                LayerSpec::Linear { out } => {
                    PrunableLayer::Linear(PrunableLinear::init(current.iter().product(), out, &mut rng))
                }
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                } => PrunableLayer::Conv(PrunableConv2d::init(
                    current[0],
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    &mut rng,
                )),
            };
            layers.push(layer);
            current = shape.clone();
        }
        let norms: Vec<BatchNorm> = if arch.batch_norm {
            shapes.iter().map(|s| BatchNorm::new(s[0])).collect()
        } else {
            Vec::new()
        };
        let features: usize = current.iter().product();
        let embedding = DenseLinear::init(features, arch.embedding_dim, &mut rng);
        let classifier = DenseLinear::init(arch.embedding_dim, arch.num_classes, &mut rng);
        let mut bn_stats = BTreeMap::new();
        if arch.batch_norm {
            bn_stats.insert(DENSE_KEY, norms.iter().map(|n| RunningStats::new(n.channels())).collect());
        }
        Ok(Self {
            arch: arch.clone(),
            layers,
            norms,
            embedding,
            classifier,
            bn_stats,
        })
    }

    pub fn has_batch_norm(&self) -> bool {
        !self.norms.is_empty()
    }

    /// Checks every structural invariant; used after deserialization.
    pub fn validate(&self) -> Result<()> {
        let reference = Self::init(&self.arch, 0)?;
        let specs = reference.param_specs();
        let ours = self.param_specs();
        if specs != ours {
            return Err(Error::shape("parameters do not match the architecture"));
        }
        for layer in &self.layers {
            let p = layer.param();
            if p.weight.shape() != p.score.shape() {
                return Err(Error::shape("weight and score shapes differ"));
            }
        }
        for (key, stats) in &self.bn_stats {
            if *key == 0 || *key > DENSE_KEY || stats.len() != self.norms.len() {
                return Err(Error::shape(format!("bad running stats entry for key {key}")));
            }
            for (s, n) in stats.iter().zip(&self.norms) {
                if s.channels() != n.channels() || s.var.len() != n.channels() {
                    return Err(Error::shape("running stats channel count"));
                }
            }
        }
        if self.params().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let spec = |name: String, role, layer, shape: &[usize], block_len| ParamSpec {
            name,
            role,
            layer,
            shape: shape.to_vec(),
            block_len,
        };
        for (i, layer) in self.layers.iter().enumerate() {
            let shape = layer.param().shape();
            let block = layer.block_len();
            specs.push(spec(format!("layer{i}.weight"), ParamRole::Weight, Some(i), shape, block));
            specs.push(spec(format!("layer{i}.score"), ParamRole::Score, Some(i), shape, block));
            let b = layer.bias().len();
            specs.push(spec(format!("layer{i}.bias"), ParamRole::Bias, Some(i), &[b], b));
            if let Some(norm) = self.norms.get(i) {
                let c = norm.channels();
                specs.push(spec(format!("layer{i}.norm.gamma"), ParamRole::NormScale, Some(i), &[c], c));
                specs.push(spec(format!("layer{i}.norm.beta"), ParamRole::NormShift, Some(i), &[c], c));
            }
        }
        for (name, head) in [("embedding", &self.embedding), ("classifier", &self.classifier)] {
            let shape = head.weight.shape();
            specs.push(spec(format!("{name}.weight"), ParamRole::HeadWeight, None, shape, head.weight.len()));
            let b = head.bias.len();
            specs.push(spec(format!("{name}.bias"), ParamRole::HeadBias, None, &[b], b));
        }
        specs
    }

    /// Parameter slices in [`param_specs`](Self::param_specs) order.
    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            out.push(layer.param().weight.data());
            out.push(layer.param().score.data());
            out.push(layer.bias());
            if let Some(norm) = self.norms.get(i) {
                out.push(&norm.gamma);
                out.push(&norm.beta);
            }
        }
        for head in [&self.embedding, &self.classifier] {
            out.push(head.weight.data());
            out.push(&head.bias);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        let mut norms = self.norms.iter_mut();
        for layer in self.layers.iter_mut() {
            let (param, bias) = match layer {
                PrunableLayer::Linear(l) => (&mut l.param, &mut l.bias),
                PrunableLayer::Conv(c) => (&mut c.param, &mut c.bias),
            };
            out.push(param.weight.data_mut());
            out.push(param.score.data_mut());
            out.push(bias);
            if let Some(norm) = norms.next() {
                out.push(&mut norm.gamma);
                out.push(&mut norm.beta);
            }
        }
        for head in [&mut self.embedding, &mut self.classifier] {
            out.push(head.weight.data_mut());
            out.push(&mut head.bias);
        }
        out
    }

    /// Per-layer masks at one capacity.
    pub fn masks(&self, capacity: f64) -> Result<Vec<CapacityMask>> {
        self.layers
            .iter()
            .map(|l| prunable::build_mask(l.param(), capacity))
            .collect()
    }

    /// Masks for several capacities, indexed `[capacity][layer]`. One ranking
    /// per layer, so the result nests whenever the capacities do.
    pub fn masks_for(&self, capacities: &[f64]) -> Result<Vec<Vec<CapacityMask>>> {
        let per_layer = self
            .layers
            .iter()
            .map(|l| prunable::build_masks(l.param(), capacities))
            .collect::<Result<Vec<_>>>()?;
        Ok((0..capacities.len())
            .map(|c| per_layer.iter().map(|m| m[c].clone()).collect())
            .collect())
    }

    pub fn full_masks(&self) -> Vec<CapacityMask> {
        self.layers.iter().map(|l| CapacityMask::full(l.param().shape())).collect()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let shape = input.shape();
        if shape.len() != 4 || shape[1..] != self.arch.input {
            return Err(Error::shape(format!(
                "model expects [N, {}, {}, {}], got {shape:?}",
                self.arch.input[0], self.arch.input[1], self.arch.input[2]
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor, masks: &[CapacityMask], mode: NormMode<'_>) -> Result<ForwardTrace> {
        self.check_input(input)?;
        if masks.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "{} masks for {} layers",
                masks.len(),
                self.layers.len()
            )));
        }
        if let NormMode::Running(stats) = mode {
            if stats.len() != self.norms.len() {
                return Err(Error::shape("running stats do not cover every norm layer"));
            }
        }
        let mut x = input.clone();
        let mut layer_caches = Vec::with_capacity(self.layers.len());
        let mut norm_caches = Vec::new();
        let mut post_norm = Vec::with_capacity(self.layers.len());
        let mut moments = Vec::new();
        for (i, (layer, mask)) in self.layers.iter().zip(masks).enumerate() {
            if !layer.is_conv() && x.shape().len() > 2 {
                x = x.flatten_items();
            }
            let (pre, cache) = layer.forward_masked(mask, &x)?;
            let normed = match (self.norms.get(i), mode) {
                (None, _) => pre,
                (Some(norm), NormMode::Batch) => {
                    let (y, nc, m) = norm.forward_train(&pre)?;
                    norm_caches.push(nc);
                    moments.push(m);
                    y
                }
                (Some(norm), NormMode::Running(stats)) => norm.forward_eval(&pre, &stats[i])?,
            };
            x = numerics::relu(&normed);
            layer_caches.push(cache);
            post_norm.push(normed);
        }
        let backbone_shape = x.shape().to_vec();
        let features = x.flatten_items();
        let embedding = self.embedding.forward(&features)?;
        let logits = self.classifier.forward(&embedding)?;
        Ok(ForwardTrace {
            layer_caches,
            norm_caches,
            post_norm,
            moments,
            backbone_shape,
            features,
            embedding,
            logits,
        })
    }

    /// Gradients of a loss with respect to every parameter, aligned with
    /// [`param_specs`](Self::param_specs). `trace` must come from a
    /// batch-mode forward with the same masks.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        masks: &[CapacityMask],
        grad_logits: &Tensor,
        score_mode: ScoreGradient,
    ) -> Result<Vec<Vec<f64>>> {
        if self.has_batch_norm() && trace.norm_caches.len() != self.norms.len() {
            return Err(Error::invalid("backward needs a batch-statistics forward trace"));
        }
        let (cls_w, cls_b, grad_emb) = self.classifier.backward(&trace.embedding, grad_logits)?;
        let (emb_w, emb_b, grad_feat) = self.embedding.backward(&trace.features, &grad_emb)?;
        let mut grad = grad_feat.reshape(trace.backbone_shape.clone())?;
        let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.layers.len()];
        for i in (0..self.layers.len()).rev() {
            let post = &trace.post_norm[i];
            let g = numerics::relu_backward(post, &grad.reshape(post.shape().to_vec())?);
            let (g, norm_grads) = match self.norms.get(i) {
                Some(norm) => {
                    let (dx, dgamma, dbeta) = norm.backward(&trace.norm_caches[i], &g)?;
                    (dx, Some((dgamma, dbeta)))
                }
                None => (g, None),
            };
            let lg = self.layers[i].backward_masked(&masks[i], &trace.layer_caches[i], &g, score_mode)?;
            let mut grads = vec![lg.weight.into_data(), lg.score.into_data(), lg.bias];
            if let Some((dgamma, dbeta)) = norm_grads {
                grads.push(dgamma);
                grads.push(dbeta);
            }
            per_layer[i] = grads;
            grad = lg.input;
        }
        let mut out: Vec<Vec<f64>> = per_layer.into_iter().flatten().collect();
        out.extend([emb_w.into_data(), emb_b, cls_w.into_data(), cls_b]);
        Ok(out)
    }

    /// Running statistics for a capacity, falling back to the dense ones.
    pub fn stats_for(&self, capacity: f64) -> Option<&[RunningStats]> {
        if !self.has_batch_norm() {
            return None;
        }
        match self.bn_stats.get(&capacity_key(capacity)) {
            Some(s) => Some(s),
            None => {
                log::warn!("no recalibrated statistics for capacity {capacity}; using dense statistics");
                self.bn_stats.get(&DENSE_KEY).map(|s| s.as_slice())
            }
        }
    }

    /// Inference-mode forward at one capacity, in chunks of `chunk` items.
    /// Returns `(embeddings, logits)`.
    pub fn infer(&self, input: &Tensor, capacity: f64) -> Result<(Tensor, Tensor)> {
        let masks = if capacity_key(capacity) == DENSE_KEY {
            self.full_masks()
        } else {
            self.masks(capacity)?
        };
        let stats = self.stats_for(capacity);
        self.infer_with(input, &masks, stats)
    }

    pub fn infer_with(
        &self,
        input: &Tensor,
        masks: &[CapacityMask],
        stats: Option<&[RunningStats]>,
    ) -> Result<(Tensor, Tensor)> {
        const CHUNK: usize = 512;
        self.check_input(input)?;
        let mode = match stats {
            Some(s) => NormMode::Running(s),
            None if self.has_batch_norm() => return Err(Error::invalid("model has no running statistics")),
            None => NormMode::Running(&[]),
        };
        let n = input.shape()[0];
        let mut emb = Vec::with_capacity(n * self.arch.embedding_dim);
        let mut logits = Vec::with_capacity(n * self.arch.num_classes);
        for start in (0..n).step_by(CHUNK) {
            let idx: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let part = input.select_rows(&idx)?;
            let trace = self.forward(&part, masks, mode)?;
            emb.extend_from_slice(trace.embedding.data());
            logits.extend_from_slice(trace.logits.data());
        }
        Ok((
            Tensor::new(vec![n, self.arch.embedding_dim], emb)?,
            Tensor::new(vec![n, self.arch.num_classes], logits)?,
        ))
    }

    /// Classification accuracy in `[0, 1]`.
    pub fn accuracy(&self, input: &Tensor, labels: &[usize], capacity: f64) -> Result<f64> {
        let (_, logits) = self.infer(input, capacity)?;
        accuracy_of(&logits, labels)
    }
}

pub fn accuracy_of(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() || labels.is_empty() {
        return Err(Error::shape("label count does not match predictions"));
    }
    let hits = numerics::argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}
