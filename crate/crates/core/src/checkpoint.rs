//! Model checkpoints: every parameter tensor, every stored set of running
//! statistics, and the run's config text and seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, PayloadReader, PayloadWriter};
use crate::error::{Error, Result};
use crate::model::{ArchSpec, PrunableModel};
use crate::numerics::RunningStats;

pub const MAGIC: &[u8; 8] = b"PRUNCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Verbatim config text the run was started from.
    pub config: String,
    pub seed: u64,
    pub steps: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StatsEntry {
    capacity_key: u32,
    channels: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: ArchSpec,
    tensors: Vec<TensorEntry>,
    bn_stats: Vec<StatsEntry>,
    meta: CheckpointMeta,
}

pub fn save_checkpoint(model: &PrunableModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let header = Header {
        arch: model.arch.clone(),
        tensors: model
            .param_specs()
            .into_iter()
            .map(|s| TensorEntry {
                name: s.name,
                shape: s.shape,
            })
            .collect(),
        bn_stats: model
            .bn_stats
            .iter()
            .map(|(&k, s)| StatsEntry {
                capacity_key: k,
                channels: s.iter().map(|r| r.channels()).collect(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let mut w = PayloadWriter::default();
    for p in model.params() {
        w.f64s(p);
    }
    for stats in model.bn_stats.values() {
        for s in stats {
            w.f64s(&s.mean);
            w.f64s(&s.var);
        }
    }
    container::write(path, MAGIC, VERSION, &header, &w.finish())
}

pub fn load_checkpoint(path: &Path) -> Result<(PrunableModel, CheckpointMeta)> {
    let (header, payload): (Header, _) = container::read(path, MAGIC, VERSION)?;
    let mut model = PrunableModel::init(&header.arch, 0)?;
    let specs = model.param_specs();
    if specs.len() != header.tensors.len()
        || specs.iter().zip(&header.tensors).any(|(s, t)| s.name != t.name || s.shape != t.shape)
    {
        return Err(Error::format(path, "tensor table does not match the architecture"));
    }
    let mut r = PayloadReader::new(path, &payload);
    for p in model.params_mut() {
        let values = r.f64s(p.len())?;
        p.copy_from_slice(&values);
    }
    model.bn_stats.clear();
    for entry in &header.bn_stats {
        let mut stats = Vec::with_capacity(entry.channels.len());
        for &c in &entry.channels {
            let mean = r.f64s(c)?;
            let var = r.f64s(c)?;
            stats.push(RunningStats { mean, var });
        }
        model.bn_stats.insert(entry.capacity_key, stats);
    }
    r.finish()?;
    model.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok((model, header.meta))
}
