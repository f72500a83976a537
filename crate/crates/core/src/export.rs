//! Post-training pruning into standalone sparse subnetworks, nesting checks
//! and the COO artifact format.
//!
//! Element-granular layers store one `(row, col, value)` triple per kept
//! connection, where `row` is the output unit (or output channel) and `col`
//! the flat offset within that row. Kernel-granular layers store the index of
//! each kept output kernel followed by all of its values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, PayloadReader, PayloadWriter};
use crate::error::{Error, Result};
use crate::model::{capacity_key, ArchSpec, DenseLinear, PrunableModel, DENSE_KEY};
use crate::numerics::{BatchNorm, RunningStats, Tensor};
use crate::prunable::{self, CapacityMask, PrunableLayer, ScoredTensor};

pub const MAGIC: &[u8; 8] = b"PRUNCOO\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Element,
    Kernel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseLayer {
    /// Dense weight shape, `[out, ...]`.
    pub shape: Vec<usize>,
    pub granularity: Granularity,
    /// Output index of every entry (element) or kept kernel (kernel).
    pub rows: Vec<u32>,
    /// Offset within the row; empty for kernel granularity.
    pub cols: Vec<u32>,
    pub values: Vec<f64>,
    pub bias: Vec<f64>,
}

impl SparseLayer {
    fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    fn from_mask(weight: &Tensor, mask: &CapacityMask, bias: &[f64], granularity: Granularity) -> Self {
        let shape = weight.shape().to_vec();
        let row_len: usize = shape[1..].iter().product();
        let (mut rows, mut cols, mut values) = (Vec::new(), Vec::new(), Vec::new());
        match granularity {
            Granularity::Element => {
                for (i, (&keep, &w)) in mask.bits().iter().zip(weight.data()).enumerate() {
                    if keep {
                        rows.push((i / row_len) as u32);
                        cols.push((i % row_len) as u32);
                        values.push(w);
                    }
                }
            }
            Granularity::Kernel => {
                for (k, chunk) in mask.bits().chunks(row_len).enumerate() {
                    if chunk[0] {
                        rows.push(k as u32);
                        values.extend_from_slice(&weight.data()[k * row_len..(k + 1) * row_len]);
                    }
                }
            }
        }
        Self {
            shape,
            granularity,
            rows,
            cols,
            values,
            bias: bias.to_vec(),
        }
    }

    /// Kept connections.
    pub fn nonzeros(&self) -> usize {
        self.values.len()
    }

    pub fn dense_len(&self) -> usize {
        self.shape.iter().product()
    }

    fn validate(&self) -> Result<()> {
        let rows = self.shape[0];
        let row_len = self.row_len();
        if self.bias.len() != rows {
            return Err(Error::shape("bias length differs from output count"));
        }
        match self.granularity {
            Granularity::Element => {
                if self.rows.len() != self.values.len() || self.cols.len() != self.values.len() {
                    return Err(Error::shape("COO index and value counts differ"));
                }
                let mut prev: Option<(u32, u32)> = None;
                for (&r, &c) in self.rows.iter().zip(&self.cols) {
                    if r as usize >= rows || c as usize >= row_len {
                        return Err(Error::invalid(format!("COO index ({r}, {c}) out of range")));
                    }
                    if prev.is_some_and(|p| p >= (r, c)) {
                        return Err(Error::invalid(format!("COO indices not strictly sorted at ({r}, {c})")));
                    }
                    prev = Some((r, c));
                }
            }
            Granularity::Kernel => {
                if !self.cols.is_empty() || self.values.len() != self.rows.len() * row_len {
                    return Err(Error::shape("kernel entries do not match kernel size"));
                }
                if self.rows.windows(2).any(|w| w[0] >= w[1]) || self.rows.iter().any(|&r| r as usize >= rows) {
                    return Err(Error::invalid("kernel indices not strictly sorted or out of range"));
                }
            }
        }
        if self.values.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sparse layer values".into()));
        }
        Ok(())
    }

    /// Dense weight with zeros at pruned positions, plus the keep mask.
    fn densify(&self) -> (Vec<f64>, Vec<bool>) {
        let row_len = self.row_len();
        let mut weight = vec![0.0; self.dense_len()];
        let mut keep = vec![false; self.dense_len()];
        match self.granularity {
            Granularity::Element => {
                for ((&r, &c), &v) in self.rows.iter().zip(&self.cols).zip(&self.values) {
                    let i = r as usize * row_len + c as usize;
                    weight[i] = v;
                    keep[i] = true;
                }
            }
            Granularity::Kernel => {
                for (j, &r) in self.rows.iter().enumerate() {
                    let base = r as usize * row_len;
                    weight[base..base + row_len].copy_from_slice(&self.values[j * row_len..(j + 1) * row_len]);
                    keep[base..base + row_len].fill(true);
                }
            }
        }
        (weight, keep)
    }
}

/// A pruned, self-contained network at one capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSubnetwork {
    pub capacity: f64,
    pub arch: ArchSpec,
    pub layers: Vec<SparseLayer>,
    pub norms: Vec<BatchNorm>,
    /// Running statistics used at inference; empty without batch norm.
    pub bn_stats: Vec<RunningStats>,
    pub embedding: DenseLinear,
    pub classifier: DenseLinear,
}

fn check_capacity(capacity: f64) -> Result<()> {
    if capacity > 0.0 && capacity <= 1.0 {
        Ok(())
    } else {
        Err(Error::Capacity(capacity))
    }
}

fn assemble(model: &PrunableModel, capacity: f64, masks: &[CapacityMask], kernel: &[bool]) -> Result<SparseSubnetwork> {
    let bn_stats = model.stats_for(capacity).map(|s| s.to_vec()).unwrap_or_default();
    let layers = model
        .layers
        .iter()
        .zip(masks)
        .zip(kernel)
        .map(|((l, m), &k)| {
            let g = if k { Granularity::Kernel } else { Granularity::Element };
            SparseLayer::from_mask(&l.param().weight, m, l.bias(), g)
        })
        .collect();
    Ok(SparseSubnetwork {
        capacity,
        arch: model.arch.clone(),
        layers,
        norms: model.norms.clone(),
        bn_stats,
        embedding: model.embedding.clone(),
        classifier: model.classifier.clone(),
    })
}

/// Unstructured pruning: per-layer top-k by score. Uses the running
/// statistics stored for `capacity`, or the dense ones (with a warning).
pub fn prune(model: &PrunableModel, capacity: f64) -> Result<SparseSubnetwork> {
    check_capacity(capacity)?;
    let masks = model.masks(capacity)?;
    assemble(model, capacity, &masks, &vec![false; masks.len()])
}

/// Masks used by [`structured_prune`]: whole kernels for convolutions,
/// element top-k for linear layers.
pub fn structured_masks(model: &PrunableModel, capacity: f64) -> Result<Vec<CapacityMask>> {
    if !model.arch.has_conv() {
        return Err(Error::invalid("structured pruning needs at least one convolutional layer"));
    }
    model
        .layers
        .iter()
        .map(|l| match l {
            PrunableLayer::Conv(_) => prunable::build_kernel_mask(l, capacity),
            PrunableLayer::Linear(_) => prunable::build_mask(l.param(), capacity),
        })
        .collect()
}

/// Keeps the `ceil(capacity * kernels)` kernels with the highest mean score
/// in every convolution. Linear layers are pruned element-wise.
pub fn structured_prune(model: &PrunableModel, capacity: f64) -> Result<SparseSubnetwork> {
    check_capacity(capacity)?;
    let masks = structured_masks(model, capacity)?;
    let kernel: Vec<bool> = model.layers.iter().map(|l| l.is_conv()).collect();
    assemble(model, capacity, &masks, &kernel)
}

impl SparseSubnetwork {
    pub fn validate(&self) -> Result<()> {
        check_capacity(self.capacity)?;
        let reference = PrunableModel::init(&self.arch, 0)?;
        if self.layers.len() != reference.layers.len() || self.norms.len() != reference.norms.len() {
            return Err(Error::shape("layer count does not match the architecture"));
        }
        for (s, r) in self.layers.iter().zip(&reference.layers) {
            if s.shape != r.param().shape() {
                return Err(Error::shape(format!("layer shape {:?}, expected {:?}", s.shape, r.param().shape())));
            }
            if s.granularity == Granularity::Kernel && !r.is_conv() {
                return Err(Error::invalid("kernel granularity on a linear layer"));
            }
            s.validate()?;
        }
        if !self.norms.is_empty() && self.bn_stats.len() != self.norms.len() {
            return Err(Error::shape("running statistics do not cover every norm layer"));
        }
        for (n, s) in self.norms.iter().zip(&self.bn_stats) {
            if n.beta.len() != n.channels() || s.channels() != n.channels() || s.var.len() != n.channels() {
                return Err(Error::shape("norm channel counts"));
            }
        }
        for (head, reference) in [(&self.embedding, &reference.embedding), (&self.classifier, &reference.classifier)] {
            if head.weight.shape() != reference.weight.shape() || head.bias.len() != reference.bias.len() {
                return Err(Error::shape("head shapes do not match the architecture"));
            }
        }
        Ok(())
    }

    /// Kept connections per layer.
    pub fn nonzeros(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.nonzeros()).collect()
    }

    /// A dense model holding zeros at pruned positions, with scores equal to
    /// the keep mask and this subnetwork's statistics stored as dense.
    pub fn to_model(&self) -> Result<PrunableModel> {
        let mut model = PrunableModel::init(&self.arch, 0)?;
        for (dst, src) in model.layers.iter_mut().zip(&self.layers) {
            let (weight, keep) = src.densify();
            let score = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
            *dst.param_mut() = ScoredTensor::new(
                Tensor::new(src.shape.clone(), weight)?,
                Tensor::new(src.shape.clone(), score)?,
            )?;
            dst.bias_mut().clone_from(&src.bias);
        }
        model.norms.clone_from(&self.norms);
        model.embedding = self.embedding.clone();
        model.classifier = self.classifier.clone();
        model.bn_stats.clear();
        if !self.bn_stats.is_empty() {
            model.bn_stats.insert(DENSE_KEY, self.bn_stats.clone());
        }
        Ok(model)
    }

    /// Inference: `(embeddings, logits)`. Runs the same kernels over the
    /// densified weights as the masked dense model, so results agree bit for
    /// bit.
    pub fn infer(&self, input: &Tensor) -> Result<(Tensor, Tensor)> {
        let model = self.to_model()?;
        let masks = model.full_masks();
        let stats = (!self.bn_stats.is_empty()).then_some(self.bn_stats.as_slice());
        model.infer_with(input, &masks, stats)
    }

    pub fn storage_report(&self) -> StorageReport {
        let nonzeros: usize = self.nonzeros().iter().sum();
        let dense: usize = self.layers.iter().map(|l| l.dense_len()).sum();
        let index_bytes: usize = self.layers.iter().map(|l| 4 * (l.rows.len() + l.cols.len())).sum();
        let mut flops = 0;
        let mut shape = self.arch.input.to_vec();
        for (layer, out) in self.layers.iter().zip(self.arch.layer_shapes().unwrap_or_default()) {
            let positions: usize = out[1..].iter().product();
            flops += 2 * layer.nonzeros() * positions;
            shape = out;
        }
        let features: usize = shape.iter().product();
        flops += 2 * (features * self.arch.embedding_dim + self.arch.embedding_dim * self.arch.num_classes);
        StorageReport {
            capacity: self.capacity,
            nonzeros,
            dense_connections: dense,
            coo_value_bytes: 8 * nonzeros,
            coo_index_bytes: index_bytes,
            dense_value_bytes: 8 * dense,
            flops_per_item: flops,
        }
    }
}

/// Storage and theoretical compute of a subnetwork's prunable layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub capacity: f64,
    pub nonzeros: usize,
    pub dense_connections: usize,
    pub coo_value_bytes: usize,
    pub coo_index_bytes: usize,
    pub dense_value_bytes: usize,
    /// Multiply-adds times two over prunable layers and heads, per item.
    pub flops_per_item: usize,
}

/// Checks `mask(c_i) ⊆ mask(c_j)` for every layer and every pair
/// `c_i <= c_j`, building each capacity's masks independently.
pub fn verify_nesting(model: &PrunableModel, capacities: &[f64]) -> Result<NestingReport> {
    if capacities.len() < 2 {
        return Err(Error::invalid("nesting needs at least two capacities"));
    }
    let mut caps = capacities.to_vec();
    for &c in &caps {
        check_capacity(c)?;
    }
    caps.sort_by(f64::total_cmp);
    let masks = caps
        .iter()
        .map(|&c| Ok((c, model.masks(c)?)))
        .collect::<Result<Vec<_>>>()?;
    check_nesting(&masks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestingReport {
    pub capacities: Vec<f64>,
    pub pairs_checked: usize,
}

/// Nesting check over explicit masks, given as `(capacity, per-layer masks)`
/// in ascending capacity order.
pub fn check_nesting(masks: &[(f64, Vec<CapacityMask>)]) -> Result<NestingReport> {
    let mut pairs = 0;
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            let (small, ref ms) = masks[i];
            let (large, ref ml) = masks[j];
            for (layer, (a, b)) in ms.iter().zip(ml).enumerate() {
                let coordinates = a.violations_against(b);
                if !coordinates.is_empty() {
                    return Err(Error::Nesting {
                        layer,
                        smaller: small,
                        larger: large,
                        coordinates,
                    });
                }
            }
            pairs += 1;
        }
    }
    Ok(NestingReport {
        capacities: masks.iter().map(|m| m.0).collect(),
        pairs_checked: pairs,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    shape: Vec<usize>,
    granularity: Granularity,
    /// Element entries or kept kernels.
    count: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: ArchSpec,
    layers: Vec<LayerEntry>,
    norm_channels: Vec<usize>,
    has_stats: bool,
}

fn encode_payload(sub: &SparseSubnetwork) -> Vec<u8> {
    let mut w = PayloadWriter::default();
    w.f64s(&[sub.capacity]);
    for l in &sub.layers {
        w.u32s(&l.rows);
        w.u32s(&l.cols);
        w.f64s(&l.values);
        w.f64s(&l.bias);
    }
    for n in &sub.norms {
        w.f64s(&[n.eps, n.momentum]);
        w.f64s(&n.gamma);
        w.f64s(&n.beta);
    }
    for s in &sub.bn_stats {
        w.f64s(&s.mean);
        w.f64s(&s.var);
    }
    for head in [&sub.embedding, &sub.classifier] {
        w.f64s(head.weight.data());
        w.f64s(&head.bias);
    }
    w.finish()
}

/// Writes the COO container. Refuses invalid subnetworks.
pub fn export_coo(sub: &SparseSubnetwork, path: &Path) -> Result<()> {
    sub.validate()?;
    let header = Header {
        arch: sub.arch.clone(),
        layers: sub
            .layers
            .iter()
            .map(|l| LayerEntry {
                shape: l.shape.clone(),
                granularity: l.granularity,
                count: l.rows.len(),
            })
            .collect(),
        norm_channels: sub.norms.iter().map(|n| n.channels()).collect(),
        has_stats: !sub.bn_stats.is_empty(),
    };
    container::write(path, MAGIC, VERSION, &header, &encode_payload(sub))
}

pub fn import_coo(path: &Path) -> Result<SparseSubnetwork> {
    let (header, payload): (Header, _) = container::read(path, MAGIC, VERSION)?;
    let reference = PrunableModel::init(&header.arch, 0)?;
    let mut r = PayloadReader::new(path, &payload);
    let capacity = r.f64s(1)?[0];
    let mut layers = Vec::with_capacity(header.layers.len());
    for entry in &header.layers {
        if entry.shape.len() < 2 || entry.shape.iter().any(|&d| d == 0) {
            return Err(Error::format(path, "bad layer shape"));
        }
        let row_len: usize = entry.shape[1..].iter().product();
        let (cols, values) = match entry.granularity {
            Granularity::Element => (entry.count, entry.count),
            Granularity::Kernel => (0, entry.count * row_len),
        };
        layers.push(SparseLayer {
            shape: entry.shape.clone(),
            granularity: entry.granularity,
            rows: r.u32s(entry.count)?,
            cols: r.u32s(cols)?,
            values: r.f64s(values)?,
            bias: r.f64s(entry.shape[0])?,
        });
    }
    let mut norms = Vec::new();
    for &c in &header.norm_channels {
        let hyper = r.f64s(2)?;
        norms.push(BatchNorm {
            eps: hyper[0],
            momentum: hyper[1],
            gamma: r.f64s(c)?,
            beta: r.f64s(c)?,
        });
    }
    let mut bn_stats = Vec::new();
    if header.has_stats {
        for &c in &header.norm_channels {
            bn_stats.push(RunningStats {
                mean: r.f64s(c)?,
                var: r.f64s(c)?,
            });
        }
    }
    let mut heads = Vec::new();
    for head in [&reference.embedding, &reference.classifier] {
        let weight = Tensor::new(head.weight.shape().to_vec(), r.f64s(head.weight.len())?)?;
        heads.push(DenseLinear {
            weight,
            bias: r.f64s(head.bias.len())?,
        });
    }
    r.finish()?;
    let classifier = heads.pop().expect("two heads");
    let embedding = heads.pop().expect("two heads");
    let sub = SparseSubnetwork {
        capacity,
        arch: header.arch,
        layers,
        norms,
        bn_stats,
        embedding,
        classifier,
    };
    sub.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(sub)
}

/// Whether a model has statistics recalibrated for `capacity`.
pub fn has_calibration(model: &PrunableModel, capacity: f64) -> bool {
    model.bn_stats.contains_key(&capacity_key(capacity))
}

/// Largest distance in units in the last place between corresponding
/// entries; `u64::MAX` when the shapes differ.
pub fn ulp_distance(a: &Tensor, b: &Tensor) -> u64 {
    fn ordered(x: f64) -> i64 {
        let bits = x.to_bits() as i64;
        if bits < 0 {
            i64::MIN - bits
        } else {
            bits
        }
    }
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ordered(x).abs_diff(ordered(y)))
        .max()
        .unwrap_or(0)
        .max(if a.shape() == b.shape() { 0 } else { u64::MAX })
}
