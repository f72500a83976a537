//! One-shot versus iterative score-only pruning of a network with frozen
//! random weights.
//!
//! One-shot: for each capacity, scores are trained from the initial network
//! with only that capacity's loss. Iterative: the first schedule capacity is
//! trained from the initial network, and every later stage trains within the
//! mask found by the stage before. Each result is evaluated after
//! batch-norm recalibration with the exact masks that were searched.

use serde::{Deserialize, Serialize};

use crate::config::StudyConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{accuracy_of, capacity_key, ArchSpec, PrunableModel, DENSE_KEY};
use crate::prunable::CapacityMask;
use crate::trainer::{recalibrate_with_masks, train_with, TrainConfig, TrainMode, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation over seeds.
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl Summary {
    pub fn of(values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            per_seed: values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityRow {
    pub capacity: f64,
    pub one_shot: Summary,
    pub iterative: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<CapacityRow>,
}

impl StudyReport {
    pub fn row(&self, capacity: f64) -> Option<&CapacityRow> {
        self.rows.iter().find(|r| capacity_key(r.capacity) == capacity_key(capacity))
    }
}

/// Test accuracies of one seed, aligned with the schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub one_shot: Vec<f64>,
    pub iterative: Vec<f64>,
}

fn stage_config(base: &TrainConfig, capacity: f64, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        capacities: vec![capacity],
        include_dense: false,
        epochs,
        seed,
        mode: TrainMode::EdgePopupScoresOnly,
        ..base.clone()
    }
}

/// Trains scores at `capacity` (within `candidates` when given) and returns
/// the resulting masks. A full capacity keeps everything and needs no search.
fn search(
    model: &mut PrunableModel,
    train: &Dataset,
    cfg: TrainConfig,
    candidates: Option<Vec<CapacityMask>>,
) -> Result<Vec<CapacityMask>> {
    let capacity = cfg.capacities[0];
    if capacity_key(capacity) == DENSE_KEY {
        return Ok(candidates.unwrap_or_else(|| model.full_masks()));
    }
    let mut trainer = Trainer::new(cfg)?;
    if let Some(c) = candidates {
        trainer = trainer.with_candidates(c);
    }
    train_with(&mut trainer, model, train)?;
    Ok(trainer.build_masks(model, &[capacity])?.remove(0))
}

fn evaluate(
    model: &mut PrunableModel,
    capacity: f64,
    masks: &[CapacityMask],
    calibration: &Dataset,
    test: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    let stats = recalibrate_with_masks(model, capacity, masks, calibration, batch_size)?;
    let stats = model.has_batch_norm().then_some(stats.as_slice());
    let (_, logits) = model.infer_with(test.images(), masks, stats)?;
    accuracy_of(&logits, test.labels())
}

/// Runs both protocols for one seed. The seed drives the random weights, the
/// initial scores, the batch order and the calibration sample.
pub fn run_seed(
    arch: &ArchSpec,
    train: &Dataset,
    test: &Dataset,
    base: &TrainConfig,
    study: &StudyConfig,
    seed: u64,
) -> Result<SeedOutcome> {
    let schedule = &study.ip_schedule;
    if schedule.is_empty() || schedule.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("schedule must be non-empty and strictly decreasing"));
    }
    let initial = PrunableModel::init(arch, seed)?;
    let calibration = train.sample_fraction(base.calibration_fraction, seed)?;
    let bs = base.batch_size;

    let mut iterative = Vec::with_capacity(schedule.len());
    let mut one_shot = Vec::with_capacity(schedule.len());
    let mut model = initial.clone();
    let mut masks: Option<Vec<CapacityMask>> = None;
    for (stage, &c) in schedule.iter().enumerate() {
        let cfg = stage_config(base, c, study.stage_epochs, seed);
        let found = search(&mut model, train, cfg.clone(), masks.take())?;
        let acc = evaluate(&mut model, c, &found, &calibration, test, bs)?;
        iterative.push(acc);
        if stage == 0 {
            // Same starting network, configuration and seed: identical run.
            one_shot.push(acc);
        } else {
            let mut fresh = initial.clone();
            let osp_masks = search(&mut fresh, train, cfg, None)?;
            one_shot.push(evaluate(&mut fresh, c, &osp_masks, &calibration, test, bs)?);
        }
        log::info!(
            "seed {seed} capacity {c}: one-shot {:.4} iterative {:.4}",
            one_shot[stage],
            iterative[stage]
        );
        masks = Some(found);
    }
    Ok(SeedOutcome { one_shot, iterative })
}

pub fn osp_vs_ip(
    arch: &ArchSpec,
    train: &Dataset,
    test: &Dataset,
    base: &TrainConfig,
    study: &StudyConfig,
) -> Result<StudyReport> {
    if study.seeds.is_empty() {
        return Err(Error::invalid("at least one seed required"));
    }
    let outcomes = study
        .seeds
        .iter()
        .map(|&s| run_seed(arch, train, test, base, study, s))
        .collect::<Result<Vec<_>>>()?;
    let rows = study
        .ip_schedule
        .iter()
        .enumerate()
        .map(|(i, &capacity)| CapacityRow {
            capacity,
            one_shot: Summary::of(outcomes.iter().map(|o| o.one_shot[i]).collect()),
            iterative: Summary::of(outcomes.iter().map(|o| o.iterative[i]).collect()),
        })
        .collect();
    Ok(StudyReport {
        seeds: study.seeds.clone(),
        rows,
    })
}
