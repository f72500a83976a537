//! Conflict-aware integration of per-loss gradients.
//!
//! Each gradient is projected off every original gradient it conflicts
//! with (negative dot product), visiting the others in a seeded random
//! order. The integrated gradient then weights each loss by
//! `cos(g_i, g_hat_i)^alpha`, so losses whose gradient had to be bent a lot
//! count less, and rescales by the number of losses:
//!
//! ```text
//! g_tilde = (N + 1) * sum_i(gamma_i * g_i) / sum_i(gamma_i)
//! ```
//!
//! Integration runs independently on each parameter block (a whole linear
//! layer or one convolution kernel).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, dot, ZERO_NORM};

/// Which vectors the reweighted sum runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum IntegrationTarget {
    /// Weighted sum of the original gradients.
    #[default]
    Original,
    /// Weighted sum of the projected gradients.
    Projected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegrationConfig {
    /// Exponent applied to the original/projected cosine.
    pub alpha: f64,
    pub shuffle_seed: u64,
    pub zero_norm_epsilon: f64,
    pub target: IntegrationTarget,
}

impl Default for IntegrationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            shuffle_seed: 0,
            zero_norm_epsilon: ZERO_NORM,
            target: IntegrationTarget::Original,
        }
    }
}

impl IntegrationConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::invalid(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        Ok(())
    }

    /// Config whose shuffle stream is specific to one block.
    pub fn for_block(&self, block: usize) -> Self {
        Self {
            shuffle_seed: mix_seed(self.shuffle_seed, block as u64),
            ..*self
        }
    }
}

/// SplitMix64 finalizer over the pair, for deriving independent seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_lengths<V: AsRef<[f64]>>(grads: &[V]) -> Result<usize> {
    let first = grads
        .first()
        .ok_or_else(|| Error::invalid("no gradients to integrate"))?
        .as_ref()
        .len();
    if grads.iter().any(|g| g.as_ref().len() != first) {
        return Err(Error::shape("gradient vectors differ in length"));
    }
    Ok(first)
}

/// Removes from `g_i` its component along `g_j`. Returns `g_i` unchanged
/// when `g_j` is (near) zero.
pub fn project(g_i: &[f64], g_j: &[f64]) -> Result<Vec<f64>> {
    let mut out = g_i.to_vec();
    project_in_place(&mut out, g_j, ZERO_NORM)?;
    Ok(out)
}

fn project_in_place(g_i: &mut [f64], g_j: &[f64], eps: f64) -> Result<()> {
    if g_i.len() != g_j.len() {
        return Err(Error::shape(format!(
            "projecting a {}-vector onto a {}-vector",
            g_i.len(),
            g_j.len()
        )));
    }
    let nn = dot(g_j, g_j);
    if nn.sqrt() < eps {
        return Ok(());
    }
    // Two passes: the second removes the rounding residue of the first, which
    // otherwise dominates `g_hat . g_i` when the two are nearly antiparallel.
    for _ in 0..2 {
        let coef = dot(g_i, g_j) / nn;
        g_i.iter_mut().zip(g_j).for_each(|(a, b)| *a -= coef * b);
    }
    Ok(())
}

/// Projects every gradient off each original gradient it conflicts with.
///
/// For each `g_i` the set of all gradients is shuffled and walked; whenever
/// the running `g_hat_i` has a negative dot product with an original `g_j`,
/// `g_hat_i` is replaced by its projection onto `g_j`'s orthogonal plane.
pub fn enumerate_project<V: AsRef<[f64]>>(grads: &[V], cfg: &IntegrationConfig) -> Result<Vec<Vec<f64>>> {
    check_lengths(grads)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut order: Vec<usize> = (0..grads.len()).collect();
    let mut out = Vec::with_capacity(grads.len());
    for g in grads {
        let mut hat = g.as_ref().to_vec();
        order.shuffle(&mut rng);
        for &j in &order {
            let gj = grads[j].as_ref();
            if dot(&hat, gj) < 0.0 {
                project_in_place(&mut hat, gj, cfg.zero_norm_epsilon)?;
            }
        }
        out.push(hat);
    }
    Ok(out)
}

/// Cosines at or below this are rounding noise and count as zero; the
/// fractional power would otherwise lift `1e-16` to a visible weight.
pub const COSINE_FLOOR: f64 = 1e-12;

/// Conflict weights `gamma_i = clamp(cos(g_i, g_hat_i), 0, 1)^alpha`.
pub fn conflict_weights<V: AsRef<[f64]>, W: AsRef<[f64]>>(
    originals: &[V],
    projected: &[W],
    alpha: f64,
) -> Result<Vec<f64>> {
    if originals.len() != projected.len() {
        return Err(Error::shape(format!(
            "{} originals but {} projections",
            originals.len(),
            projected.len()
        )));
    }
    originals
        .iter()
        .zip(projected)
        .map(|(g, h)| {
            let cos = numerics::cosine_similarity(g.as_ref(), h.as_ref())?;
            let cos = if cos <= COSINE_FLOOR { 0.0 } else { cos.min(1.0) };
            Ok(cos.powf(alpha))
        })
        .collect()
}

/// Reweighted, rescaled sum of the gradients.
pub fn integrate<V: AsRef<[f64]>, W: AsRef<[f64]>>(
    originals: &[V],
    projected: &[W],
    cfg: &IntegrationConfig,
) -> Result<Vec<f64>> {
    let len = check_lengths(originals)?;
    if check_lengths(projected)? != len {
        return Err(Error::shape("projected gradients differ in length from originals"));
    }
    let gamma = conflict_weights(originals, projected, cfg.alpha)?;
    let total: f64 = gamma.iter().sum();
    let count = originals.len() as f64;
    let mut out = vec![0.0; len];
    let summed = |out: &mut Vec<f64>, weights: &[f64]| {
        let vecs: Vec<&[f64]> = match cfg.target {
            IntegrationTarget::Original => originals.iter().map(|v| v.as_ref()).collect(),
            IntegrationTarget::Projected => projected.iter().map(|v| v.as_ref()).collect(),
        };
        for (v, &w) in vecs.iter().zip(weights) {
            out.iter_mut().zip(v.iter()).for_each(|(o, x)| *o += w * x);
        }
    };
    if total < cfg.zero_norm_epsilon {
        summed(&mut out, &vec![1.0; originals.len()]);
    } else {
        let weights: Vec<f64> = gamma.iter().map(|g| g * count / total).collect();
        summed(&mut out, &weights);
    }
    Ok(out)
}

/// Location of one integration block inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDescriptor {
    pub label: String,
    /// Index of the parameter tensor the block belongs to.
    pub param: usize,
    /// Output kernel within a convolution; `None` for a whole tensor.
    pub kernel: Option<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Per-loss gradients over a shared block layout. Every loss supplies a full
/// flat vector; subnetworks that do not use a connection contribute zeros.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    blocks: Vec<BlockDescriptor>,
    per_loss: Vec<Vec<f64>>,
}

impl GradientBundle {
    pub fn new(blocks: Vec<BlockDescriptor>, per_loss: Vec<Vec<f64>>) -> Result<Self> {
        if per_loss.is_empty() {
            return Err(Error::Bundle("no losses".into()));
        }
        let mut offset = 0;
        for b in &blocks {
            if b.offset != offset || b.len == 0 {
                return Err(Error::Bundle(format!(
                    "block {} at offset {} (len {}) does not tile the vector (expected offset {offset})",
                    b.label, b.offset, b.len
                )));
            }
            offset += b.len;
        }
        for (i, g) in per_loss.iter().enumerate() {
            if g.len() != offset {
                return Err(Error::Bundle(format!(
                    "loss {i} has {} gradient values, blocks cover {offset}",
                    g.len()
                )));
            }
        }
        Ok(Self { blocks, per_loss })
    }

    pub fn blocks(&self) -> &[BlockDescriptor] {
        &self.blocks
    }

    pub fn loss_count(&self) -> usize {
        self.per_loss.len()
    }

    pub fn total_len(&self) -> usize {
        self.per_loss[0].len()
    }

    pub fn loss_gradient(&self, loss: usize) -> &[f64] {
        &self.per_loss[loss]
    }

    pub fn block(&self, loss: usize, block: usize) -> &[f64] {
        let b = &self.blocks[block];
        &self.per_loss[loss][b.offset..b.offset + b.len]
    }

    fn block_grads(&self, block: usize) -> Vec<&[f64]> {
        (0..self.loss_count()).map(|l| self.block(l, block)).collect()
    }
}

/// Integrates one block.
pub fn integrate_block<V: AsRef<[f64]>>(grads: &[V], cfg: &IntegrationConfig) -> Result<Vec<f64>> {
    let projected = enumerate_project(grads, cfg)?;
    integrate(grads, &projected, cfg)
}

/// Integrates every block independently (each with its own shuffle stream)
/// and returns the flat integrated gradient.
pub fn integrate_bundle(bundle: &GradientBundle, cfg: &IntegrationConfig) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    cfg.validate()?;
    let parts = (0..bundle.blocks.len())
        .into_par_iter()
        .map(|b| integrate_block(&bundle.block_grads(b), &cfg.for_block(b)))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.concat())
}

/// Number of unordered loss pairs with a negative dot product, per block.
pub fn count_conflicts(bundle: &GradientBundle) -> Vec<usize> {
    (0..bundle.blocks.len())
        .map(|b| {
            let g = bundle.block_grads(b);
            let mut count = 0;
            for i in 0..g.len() {
                for j in i + 1..g.len() {
                    if dot(g[i], g[j]) < 0.0 {
                        count += 1;
                    }
                }
            }
            count
        })
        .collect()
}

/// Conflicting loss pairs per block, counted separately within each of the
/// block's `rows[b]` equal-length rows (output units or kernels) and summed.
pub fn count_row_conflicts(bundle: &GradientBundle, rows: &[usize]) -> Result<Vec<usize>> {
    if rows.len() != bundle.blocks.len() {
        return Err(Error::invalid("one row count per block required"));
    }
    (0..bundle.blocks.len())
        .map(|b| {
            let g = bundle.block_grads(b);
            let n = rows[b];
            if n == 0 || bundle.blocks[b].len % n != 0 {
                return Err(Error::invalid(format!("block {} does not split into {n} rows", bundle.blocks[b].label)));
            }
            let w = bundle.blocks[b].len / n;
            let mut count = 0;
            for r in 0..n {
                let span = r * w..(r + 1) * w;
                for i in 0..g.len() {
                    for j in i + 1..g.len() {
                        if dot(&g[i][span.clone()], &g[j][span.clone()]) < 0.0 {
                            count += 1;
                        }
                    }
                }
            }
            Ok(count)
        })
        .collect()
}

/// L2 norm of every loss's gradient on every block, indexed `[loss][block]`.
pub fn gradient_magnitudes(bundle: &GradientBundle) -> Vec<Vec<f64>> {
    (0..bundle.loss_count())
        .map(|l| {
            (0..bundle.blocks.len())
                .map(|b| numerics::l2_norm(bundle.block(l, b)))
                .collect()
        })
        .collect()
}
