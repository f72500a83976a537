//! Compatible multi-capacity training.
//!
//! Every step evaluates the dense network and each configured subnetwork on
//! the same batch through the shared heads, collects one gradient per loss,
//! integrates them blockwise and applies a single SGD update. Masks are
//! rebuilt from the current scores at the start of every step.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, BatchIterator, Dataset};
use crate::error::{Error, Result};
use crate::integration::{self, mix_seed, BlockDescriptor, GradientBundle, IntegrationConfig};
use crate::model::{capacity_key, NormMode, ParamRole, ParamSpec, PrunableModel, DENSE_KEY};
use crate::numerics::{self, ChannelMoments, MomentAccumulator, RunningStats};
use crate::prunable::{self, CapacityMask, ScoreGradient};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Weights, scores, biases, norms and heads all train.
    #[default]
    Compatible,
    /// Scores stay at their initial values.
    FrozenScores,
    /// Only scores train, with unfiltered straight-through gradients.
    EdgePopupScoresOnly,
}

impl TrainMode {
    pub fn trains(self, role: ParamRole) -> bool {
        match self {
            TrainMode::Compatible => true,
            TrainMode::FrozenScores => role != ParamRole::Score,
            TrainMode::EdgePopupScoresOnly => role == ParamRole::Score,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Compatible => "compatible",
            TrainMode::FrozenScores => "frozen_scores",
            TrainMode::EdgePopupScoresOnly => "edge_popup_scores_only",
        }
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compatible" => Ok(TrainMode::Compatible),
            "frozen_scores" => Ok(TrainMode::FrozenScores),
            "edge_popup_scores_only" => Ok(TrainMode::EdgePopupScoresOnly),
            other => Err(Error::invalid(format!(
                "unknown mode {other:?} (expected compatible, frozen_scores or edge_popup_scores_only)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Subnetwork capacities, strictly decreasing, each in (0, 1].
    pub capacities: Vec<f64>,
    /// Adds the dense loss (capacity 1.0) ahead of the subnetwork losses.
    pub include_dense: bool,
    pub learning_rate: f64,
    pub integration: IntegrationConfig,
    /// When false the per-loss gradients are simply summed.
    pub conflict_aware: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Applied after integration; 0 gives plain SGD.
    pub momentum: f64,
    pub weight_decay: f64,
    /// Zero the score gradient of masked-out connections.
    pub filter_scores: bool,
    /// Share of the training set used for batch-norm recalibration.
    pub calibration_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            capacities: vec![0.8, 0.6, 0.4, 0.2],
            include_dense: true,
            learning_rate: 0.02,
            integration: IntegrationConfig::default(),
            conflict_aware: true,
            epochs: 5,
            batch_size: 64,
            seed: 0,
            mode: TrainMode::Compatible,
            momentum: 0.0,
            weight_decay: 0.0,
            filter_scores: true,
            calibration_fraction: 1.0 / 30.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for &c in &self.capacities {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::Capacity(c));
            }
        }
        if self.capacities.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid(format!(
                "capacities {:?} must be strictly decreasing",
                self.capacities
            )));
        }
        if self.capacities.is_empty() && !self.include_dense {
            return Err(Error::invalid("no losses: empty capacities without the dense loss"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(format!("learning rate {} must be > 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("momentum must be in [0, 1) and weight decay >= 0"));
        }
        if !(self.calibration_fraction > 0.0 && self.calibration_fraction <= 1.0) {
            return Err(Error::invalid("calibration fraction must be in (0, 1]"));
        }
        self.integration.validate()
    }

    /// Capacity of every loss in bundle order.
    pub fn loss_capacities(&self) -> Vec<f64> {
        let mut caps = Vec::with_capacity(self.capacities.len() + 1);
        if self.include_dense {
            caps.push(1.0);
        }
        caps.extend(&self.capacities);
        caps
    }

    pub fn score_gradient(&self) -> ScoreGradient {
        if self.mode == TrainMode::EdgePopupScoresOnly || !self.filter_scores {
            ScoreGradient::Unfiltered
        } else {
            ScoreGradient::Filtered
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    /// One loss per entry of [`TrainConfig::loss_capacities`].
    pub losses: Vec<f64>,
    /// Conflicting loss pairs per bundle block.
    pub conflicts: Vec<usize>,
    /// Conflicting loss pairs per block counted within each output unit or
    /// kernel, summed over the block.
    pub unit_conflicts: Vec<usize>,
    /// Gradient L2 norms, `[loss][block]`.
    pub magnitudes: Vec<Vec<f64>>,
}

/// Block layout of the trainable parameters under `mode`.
pub fn bundle_layout(model: &PrunableModel, mode: TrainMode) -> Vec<BlockDescriptor> {
    let mut blocks = Vec::new();
    let mut offset = 0;
    for (p, spec) in model.param_specs().iter().enumerate() {
        if !mode.trains(spec.role) {
            continue;
        }
        let count = spec.len() / spec.block_len;
        for k in 0..count {
            let (label, kernel) = if count == 1 {
                (spec.name.clone(), None)
            } else {
                (format!("{}[{k}]", spec.name), Some(k))
            };
            blocks.push(BlockDescriptor {
                label,
                param: p,
                kernel,
                offset,
                len: spec.block_len,
            });
            offset += spec.block_len;
        }
    }
    blocks
}

/// Output units (or kernels) per block: a whole tensor splits along its
/// first axis, a kernel block is one row.
fn unit_rows(specs: &[ParamSpec], blocks: &[BlockDescriptor]) -> Vec<usize> {
    blocks
        .iter()
        .map(|b| match b.kernel {
            Some(_) => 1,
            None => specs[b.param].shape.first().copied().unwrap_or(1),
        })
        .collect()
}

/// Per-loss, per-block gradient norms.
pub fn gradient_magnitude_report(bundle: &GradientBundle) -> Vec<Vec<f64>> {
    integration::gradient_magnitudes(bundle)
}

struct LossPass {
    loss: f64,
    grads: Vec<Vec<f64>>,
    moments: Vec<ChannelMoments>,
}

/// Stateful optimizer: step counter (which seeds the integration shuffle),
/// momentum buffers and an optional candidate restriction.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    step: u64,
    velocity: Vec<Vec<f64>>,
    candidates: Option<Vec<CapacityMask>>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            step: 0,
            velocity: Vec::new(),
            candidates: None,
        })
    }

    /// Restricts every mask to connections kept by `candidates` (one mask per
    /// layer), for iterative pruning within a previous subnetwork.
    pub fn with_candidates(mut self, candidates: Vec<CapacityMask>) -> Self {
        self.candidates = Some(candidates);
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Per-capacity masks as the trainer builds them, honoring candidates.
    pub fn build_masks(&self, model: &PrunableModel, caps: &[f64]) -> Result<Vec<Vec<CapacityMask>>> {
        match &self.candidates {
            None => model.masks_for(caps),
            Some(cands) => {
                if cands.len() != model.layers.len() {
                    return Err(Error::shape("one candidate mask per layer required"));
                }
                caps.iter()
                    .map(|&c| {
                        model
                            .layers
                            .iter()
                            .zip(cands)
                            .map(|(l, e)| prunable::build_mask_within(l.param(), c, e))
                            .collect()
                    })
                    .collect()
            }
        }
    }

    fn check_batch(model: &PrunableModel, batch: &Batch) -> Result<()> {
        if batch.labels.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if batch.images.shape().first() != Some(&batch.labels.len()) {
            return Err(Error::shape("batch images and labels differ in count"));
        }
        if let Some(&bad) = batch.labels.iter().find(|&&l| l >= model.arch.num_classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {})", model.arch.num_classes)));
        }
        Ok(())
    }

    /// One integrated update. On a non-finite loss the model is left
    /// untouched.
    pub fn step(&mut self, model: &mut PrunableModel, batch: &Batch) -> Result<StepReport> {
        Self::check_batch(model, batch)?;
        let caps = self.cfg.loss_capacities();
        let masks = self.build_masks(model, &caps)?;
        let score_mode = self.cfg.score_gradient();
        let snapshot: &PrunableModel = model;
        let passes = masks
            .par_iter()
            .map(|m| -> Result<LossPass> {
                let trace = snapshot.forward(&batch.images, m, NormMode::Batch)?;
                let (loss, grad) = numerics::softmax_cross_entropy(&trace.logits, &batch.labels)?;
                let grads = snapshot.backward(&trace, m, &grad, score_mode)?;
                Ok(LossPass {
                    loss,
                    grads,
                    moments: trace.moments,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for (pass, &c) in passes.iter().zip(&caps) {
            if !pass.loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss at capacity {c} on step {} is {}",
                    self.step, pass.loss
                )));
            }
        }

        let specs = model.param_specs();
        let trainable: Vec<usize> = (0..specs.len()).filter(|&p| self.cfg.mode.trains(specs[p].role)).collect();
        let blocks = bundle_layout(model, self.cfg.mode);
        let per_loss: Vec<Vec<f64>> = passes
            .iter()
            .map(|pass| trainable.iter().flat_map(|&p| pass.grads[p].iter().copied()).collect())
            .collect();
        let bundle = GradientBundle::new(blocks, per_loss)?;
        let update = if self.cfg.conflict_aware {
            let cfg = IntegrationConfig {
                shuffle_seed: mix_seed(self.cfg.integration.shuffle_seed ^ self.cfg.seed, self.step),
                ..self.cfg.integration
            };
            integration::integrate_bundle(&bundle, &cfg)?
        } else {
            let mut sum = vec![0.0; bundle.total_len()];
            for l in 0..bundle.loss_count() {
                sum.iter_mut().zip(bundle.loss_gradient(l)).for_each(|(s, g)| *s += g);
            }
            sum
        };
        if update.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("integrated gradient on step {}", self.step)));
        }
        let report = StepReport {
            step: self.step,
            losses: passes.iter().map(|p| p.loss).collect(),
            conflicts: integration::count_conflicts(&bundle),
            unit_conflicts: integration::count_row_conflicts(&bundle, &unit_rows(&specs, bundle.blocks()))?,
            magnitudes: gradient_magnitude_report(&bundle),
        };

        self.apply_update(model, &trainable, &update);
        if model.has_batch_norm() {
            let key = capacity_key(caps[0]);
            let momenta: Vec<f64> = model.norms.iter().map(|n| n.momentum).collect();
            let channels: Vec<usize> = model.norms.iter().map(|n| n.channels()).collect();
            let stats = model
                .bn_stats
                .entry(key)
                .or_insert_with(|| channels.iter().map(|&c| RunningStats::new(c)).collect());
            for ((s, m), &mom) in stats.iter_mut().zip(&passes[0].moments).zip(&momenta) {
                s.update(m, mom);
            }
        }
        self.step += 1;
        Ok(report)
    }

    fn apply_update(&mut self, model: &mut PrunableModel, trainable: &[usize], update: &[f64]) {
        let lr = self.cfg.learning_rate;
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        if mu > 0.0 && self.velocity.is_empty() {
            let params = model.params();
            self.velocity = trainable.iter().map(|&p| vec![0.0; params[p].len()]).collect();
        }
        let mut params = model.params_mut();
        let mut offset = 0;
        for (t, &p) in trainable.iter().enumerate() {
            let theta = &mut params[p];
            let g = &update[offset..offset + theta.len()];
            offset += theta.len();
            for (k, (w, &gk)) in theta.iter_mut().zip(g).enumerate() {
                let mut d = gk;
                if wd > 0.0 {
                    d += wd * *w;
                }
                if mu > 0.0 {
                    let v = &mut self.velocity[t][k];
                    *v = mu * *v + d;
                    d = *v;
                }
                *w -= lr * d;
            }
        }
    }
}

/// Single step with a fresh trainer (step index 0).
pub fn train_step(model: &mut PrunableModel, batch: &Batch, cfg: &TrainConfig) -> Result<StepReport> {
    Trainer::new(cfg.clone())?.step(model, batch)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepReport>,
}

impl TrainReport {
    /// Mean of each loss over a range of steps.
    pub fn mean_losses(&self, range: std::ops::Range<usize>) -> Vec<f64> {
        let steps = &self.steps[range];
        let n = steps.first().map_or(0, |s| s.losses.len());
        (0..n)
            .map(|l| steps.iter().map(|s| s.losses[l]).sum::<f64>() / steps.len() as f64)
            .collect()
    }
}

/// Runs `trainer` for its configured epochs over `dataset`.
pub fn train_with(trainer: &mut Trainer, model: &mut PrunableModel, dataset: &Dataset) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if dataset.item_shape() != model.arch.input {
        return Err(Error::shape(format!(
            "dataset items {:?} but model input {:?}",
            dataset.item_shape(),
            model.arch.input
        )));
    }
    let cfg = trainer.config().clone();
    let batches = BatchIterator::new(dataset.len(), cfg.batch_size, cfg.seed)?;
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let start = report.steps.len();
        for indices in batches.epoch(epoch) {
            let batch = dataset.batch(&indices)?;
            report.steps.push(trainer.step(model, &batch)?);
        }
        log::info!(
            "epoch {}/{}: mean losses {:?}",
            epoch + 1,
            cfg.epochs,
            report.mean_losses(start..report.steps.len())
        );
    }
    Ok(report)
}

pub fn train(model: &mut PrunableModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    let mut trainer = Trainer::new(cfg.clone())?;
    train_with(&mut trainer, model, dataset)
}

/// Recomputes batch-norm running statistics for `capacity` from masked
/// forwards over `calibration` (in order, `batch_size` items at a time) and
/// stores them under that capacity. The statistics are the exact pooled
/// mean and population variance over every calibration activation. Models
/// without batch norm are left unchanged and yield an empty set.
pub fn adaptive_bn_recalibrate(
    model: &mut PrunableModel,
    capacity: f64,
    calibration: &Dataset,
    batch_size: usize,
) -> Result<Vec<RunningStats>> {
    if !(capacity > 0.0 && capacity <= 1.0) {
        return Err(Error::Capacity(capacity));
    }
    if calibration.is_empty() || batch_size == 0 {
        return Err(Error::invalid("recalibration needs data and batch size >= 1"));
    }
    let masks = model.masks(capacity)?;
    recalibrate_with_masks(model, capacity, &masks, calibration, batch_size)
}

/// [`adaptive_bn_recalibrate`] for explicitly given masks (for example masks
/// restricted to a previous subnetwork); stored under `capacity`.
pub fn recalibrate_with_masks(
    model: &mut PrunableModel,
    capacity: f64,
    masks: &[CapacityMask],
    calibration: &Dataset,
    batch_size: usize,
) -> Result<Vec<RunningStats>> {
    if calibration.is_empty() || batch_size == 0 {
        return Err(Error::invalid("recalibration needs data and batch size >= 1"));
    }
    if !model.has_batch_norm() {
        return Ok(Vec::new());
    }
    let mut acc: Vec<MomentAccumulator> = model.norms.iter().map(|n| MomentAccumulator::new(n.channels())).collect();
    let all: Vec<usize> = (0..calibration.len()).collect();
    for chunk in all.chunks(batch_size) {
        let batch = calibration.batch(chunk)?;
        let trace = model.forward(&batch.images, masks, NormMode::Batch)?;
        for (a, m) in acc.iter_mut().zip(&trace.moments) {
            a.push(m);
        }
    }
    let stats: Vec<RunningStats> = acc.iter().map(|a| a.finish()).collect();
    model.bn_stats.insert(capacity_key(capacity), stats.clone());
    Ok(stats)
}

/// Capacities that have stored statistics, dense included.
pub fn calibrated_capacities(model: &PrunableModel) -> Vec<f64> {
    model.bn_stats.keys().map(|&k| k as f64 / DENSE_KEY as f64).collect()
}
