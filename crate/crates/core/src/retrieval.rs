//! Retrieval evaluation: embeddings at a capacity, mAP, Recall@k and
//! query-capacity × gallery-capacity matrices.
//!
//! Gallery items are ranked by cosine similarity (embeddings are stored
//! L2-normalized), ties broken by ascending gallery index. A gallery item with
//! the same item id as the query is excluded, so evaluating a set against
//! itself never retrieves the query. Queries without any positive are
//! skipped.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::PrunableModel;
use crate::numerics::{self, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    /// `[items, dim]`, unit rows.
    matrix: Tensor,
    labels: Vec<usize>,
    /// Items with equal ids are the same underlying sample.
    ids: Vec<usize>,
    pub capacity: f64,
}

impl EmbeddingSet {
    /// Normalizes `embeddings` row-wise. Ids default to row indices.
    pub fn new(embeddings: &Tensor, labels: Vec<usize>, capacity: f64) -> Result<Self> {
        let ids = (0..labels.len()).collect();
        Self::with_ids(embeddings, labels, ids, capacity)
    }

    pub fn with_ids(embeddings: &Tensor, labels: Vec<usize>, ids: Vec<usize>, capacity: f64) -> Result<Self> {
        let (n, _) = embeddings.matrix_dims()?;
        if labels.len() != n || ids.len() != n {
            return Err(Error::shape(format!(
                "{n} embeddings, {} labels, {} ids",
                labels.len(),
                ids.len()
            )));
        }
        if !embeddings.all_finite() {
            return Err(Error::NonFinite("embeddings".into()));
        }
        Ok(Self {
            matrix: numerics::l2_normalize_rows(embeddings),
            labels,
            ids,
            capacity,
        })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.row_len()
    }
}

/// Embeddings of `dataset` from `model` at `capacity`, with item ids equal to
/// dataset indices.
pub fn extract_embeddings(model: &PrunableModel, capacity: f64, dataset: &Dataset) -> Result<EmbeddingSet> {
    if dataset.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let (emb, _) = model.infer(dataset.images(), capacity)?;
    EmbeddingSet::new(&emb, dataset.labels().to_vec(), capacity)
}

/// Gallery indices of each query's ranking (self excluded) and the query's
/// positive count.
fn rankings(query: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<Vec<(Vec<usize>, usize)>> {
    if query.dim() != gallery.dim() {
        return Err(Error::shape(format!(
            "query dim {} vs gallery dim {}",
            query.dim(),
            gallery.dim()
        )));
    }
    let sims = numerics::matmul_nt(&query.matrix, &gallery.matrix)?;
    Ok((0..query.len())
        .into_par_iter()
        .map(|q| {
            let row = sims.row(q);
            let mut order: Vec<usize> = (0..gallery.len()).filter(|&g| gallery.ids[g] != query.ids[q]).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let positives = order.iter().filter(|&&g| gallery.labels[g] == query.labels[q]).count();
            (order, positives)
        })
        .collect())
}

fn mean_over_scored(values: Vec<Option<f64>>) -> Result<f64> {
    let scored: Vec<f64> = values.into_iter().flatten().collect();
    if scored.is_empty() {
        return Err(Error::invalid("no query has a positive in the gallery"));
    }
    Ok(scored.iter().sum::<f64>() / scored.len() as f64)
}

pub fn mean_average_precision(query: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<f64> {
    let ranks = rankings(query, gallery)?;
    let per_query = ranks
        .iter()
        .enumerate()
        .map(|(q, (order, positives))| {
            if *positives == 0 {
                return None;
            }
            let mut hits = 0;
            let mut sum = 0.0;
            for (rank, &g) in order.iter().enumerate() {
                if gallery.labels[g] == query.labels[q] {
                    hits += 1;
                    sum += hits as f64 / (rank + 1) as f64;
                }
            }
            Some(sum / *positives as f64)
        })
        .collect();
    mean_over_scored(per_query)
}

pub fn recall_at_k(query: &EmbeddingSet, gallery: &EmbeddingSet, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::invalid("recall@k needs k >= 1"));
    }
    let ranks = rankings(query, gallery)?;
    let per_query = ranks
        .iter()
        .enumerate()
        .map(|(q, (order, positives))| {
            (*positives > 0).then(|| {
                let hit = order.iter().take(k).any(|&g| gallery.labels[g] == query.labels[q]);
                if hit {
                    1.0
                } else {
                    0.0
                }
            })
        })
        .collect();
    mean_over_scored(per_query)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    MeanAveragePrecision,
    RecallAt(usize),
}

impl Metric {
    pub fn evaluate(self, query: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<f64> {
        match self {
            Metric::MeanAveragePrecision => mean_average_precision(query, gallery),
            Metric::RecallAt(k) => recall_at_k(query, gallery, k),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::MeanAveragePrecision => write!(f, "map"),
            Metric::RecallAt(k) => write!(f, "recall@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        if lower == "map" {
            return Ok(Metric::MeanAveragePrecision);
        }
        match lower.strip_prefix("recall@").map(str::parse::<usize>) {
            Some(Ok(k)) if k >= 1 => Ok(Metric::RecallAt(k)),
            _ => Err(Error::invalid(format!("unknown metric {s:?} (expected map or recall@k)"))),
        }
    }
}

/// `grid[q][g]` = metric with query embeddings at `capacities[q]` and
/// gallery embeddings at `capacities[g]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    pub capacities: Vec<f64>,
    pub metric: String,
    pub grid: Vec<Vec<f64>>,
}

impl EvalMatrix {
    pub fn get(&self, query: usize, gallery: usize) -> f64 {
        self.grid[query][gallery]
    }

    pub fn self_test(&self, i: usize) -> f64 {
        self.grid[i][i]
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Grid over pre-extracted embeddings, one query and one gallery set per
/// capacity.
pub fn eval_matrix(queries: &[EmbeddingSet], galleries: &[EmbeddingSet], metric: Metric) -> Result<EvalMatrix> {
    if queries.is_empty() || queries.len() != galleries.len() {
        return Err(Error::invalid("need one query and one gallery set per capacity"));
    }
    let grid = queries
        .iter()
        .map(|q| galleries.iter().map(|g| metric.evaluate(q, g)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalMatrix {
        capacities: queries.iter().map(|q| q.capacity).collect(),
        metric: metric.to_string(),
        grid,
    })
}

pub fn cross_test_matrix(
    model: &PrunableModel,
    capacities: &[f64],
    query_set: &Dataset,
    gallery_set: &Dataset,
    metric: Metric,
) -> Result<EvalMatrix> {
    let queries = capacities
        .iter()
        .map(|&c| extract_embeddings(model, c, query_set))
        .collect::<Result<Vec<_>>>()?;
    let galleries = if std::ptr::eq(query_set, gallery_set) {
        queries.clone()
    } else {
        capacities
            .iter()
            .map(|&c| extract_embeddings(model, c, gallery_set))
            .collect::<Result<Vec<_>>>()?
    };
    eval_matrix(&queries, &galleries, metric)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(rows: &[&[f64]], labels: &[usize]) -> EmbeddingSet {
        let dim = rows[0].len();
        let t = Tensor::new(vec![rows.len(), dim], rows.concat()).unwrap();
        EmbeddingSet::new(&t, labels.to_vec(), 1.0).unwrap()
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> EmbeddingSet {
        let t = Tensor::new(vec![n, dim], (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let labels = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        EmbeddingSet::new(&t, labels, 1.0).unwrap()
    }

    /// Brute force: precision at each relevant position from explicit
    /// pairwise comparisons.
    fn brute(query: &EmbeddingSet, gallery: &EmbeddingSet, k: usize) -> (Option<f64>, Option<f64>) {
        let mut aps = Vec::new();
        let mut recalls = Vec::new();
        for q in 0..query.len() {
            let qv = query.matrix.row(q);
            let cand: Vec<usize> = (0..gallery.len()).filter(|&g| gallery.ids[g] != query.ids[q]).collect();
            let sim = |g: usize| numerics::dot(qv, gallery.matrix.row(g));
            let rank = |g: usize| {
                cand.iter()
                    .filter(|&&o| sim(o) > sim(g) || (sim(o) == sim(g) && o < g))
                    .count()
                    + 1
            };
            let pos: Vec<usize> = cand.iter().copied().filter(|&g| gallery.labels[g] == query.labels[q]).collect();
            if pos.is_empty() {
                continue;
            }
            let ranks: Vec<usize> = pos.iter().map(|&g| rank(g)).collect();
            let ap = ranks
                .iter()
                .map(|&r| ranks.iter().filter(|&&o| o <= r).count() as f64 / r as f64)
                .sum::<f64>()
                / pos.len() as f64;
            aps.push(ap);
            recalls.push(if ranks.iter().any(|&r| r <= k) { 1.0 } else { 0.0 });
        }
        let mean = |v: Vec<f64>| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        (mean(aps), mean(recalls))
    }

    #[test]
    fn examples() {
        let q = set(&[&[1.0, 0.0], &[0.0, 1.0]], &[0, 1]);
        let g = set(&[&[0.9, 0.1], &[0.1, 0.9], &[-1.0, 0.0]], &[0, 1, 2]);
        let mut q2 = q.clone();
        q2.ids = vec![10, 11];
        assert_eq!(mean_average_precision(&q2, &g).unwrap(), 1.0);
        assert_eq!(recall_at_k(&q2, &g, 1).unwrap(), 1.0);

        // Single positive ranked last among k gallery items.
        let q = set(&[&[1.0, 0.0]], &[0]);
        let mut g = set(&[&[1.0, 0.0], &[0.9, 0.1], &[0.5, 0.5], &[-1.0, 0.0]], &[1, 1, 1, 0]);
        g.ids = vec![5, 6, 7, 8];
        assert!((mean_average_precision(&q, &g).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(recall_at_k(&q, &g, 3).unwrap(), 0.0);
        assert_eq!(recall_at_k(&q, &g, 4).unwrap(), 1.0);
        assert!(recall_at_k(&q, &g, 0).is_err());
    }

    #[test]
    fn self_exclusion_and_skipping() {
        let s = set(&[&[1.0, 0.0], &[0.0, 1.0], &[0.1, 1.0]], &[0, 1, 1]);
        // Item 0 has no other positive and is skipped; items 1 and 2 find each other.
        assert_eq!(mean_average_precision(&s, &s).unwrap(), 1.0);
        let lonely = set(&[&[1.0, 0.0], &[0.0, 1.0]], &[0, 1]);
        assert!(mean_average_precision(&lonely, &lonely).is_err());
    }

    #[test]
    fn ties_break_by_gallery_index() {
        let q = set(&[&[1.0, 0.0]], &[0]);
        let mut g = set(&[&[1.0, 0.0], &[1.0, 0.0]], &[1, 0]);
        g.ids = vec![3, 4];
        assert_eq!(recall_at_k(&q, &g, 1).unwrap(), 0.0);
        assert_eq!(mean_average_precision(&q, &g).unwrap(), 0.5);
    }

    #[test]
    fn one_hot_and_full_k() {
        let rows: Vec<Vec<f64>> = (0..8).map(|i| (0..4).map(|j| if j == i % 4 { 1.0 } else { 0.0 }).collect()).collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
        let s = set(&refs, &labels);
        assert_eq!(recall_at_k(&s, &s, 1).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = random_set(&mut rng, 30, 5, 3);
        assert_eq!(recall_at_k(&r, &r, 30).unwrap(), 1.0);
    }

    #[test]
    fn rejects_bad_sets() {
        let t = Tensor::new(vec![2, 2], vec![1.0, f64::NAN, 0.0, 1.0]).unwrap();
        assert!(EmbeddingSet::new(&t, vec![0, 1], 1.0).is_err());
        assert!(EmbeddingSet::new(&Tensor::zeros(&[2, 2]), vec![0], 1.0).is_err());
        let a = set(&[&[1.0, 0.0]], &[0]);
        let b = set(&[&[1.0, 0.0, 0.0]], &[0]);
        assert!(mean_average_precision(&a, &b).is_err());
    }

    #[test]
    fn metric_parsing() {
        assert_eq!("map".parse::<Metric>().unwrap(), Metric::MeanAveragePrecision);
        assert_eq!("recall@5".parse::<Metric>().unwrap(), Metric::RecallAt(5));
        assert!("recall@0".parse::<Metric>().is_err());
        assert!("ndcg".parse::<Metric>().is_err());
        assert_eq!(Metric::RecallAt(1).to_string(), "recall@1");
    }

    #[test]
    fn matrix_json_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_set(&mut rng, 20, 4, 3);
        let m = eval_matrix(&[a.clone()], &[a.clone()], Metric::RecallAt(1)).unwrap();
        assert_eq!(m.grid.len(), 1);
        assert_eq!(m.self_test(0), recall_at_k(&a, &a, 1).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.write_json(&p).unwrap();
        assert_eq!(EvalMatrix::read_json(&p).unwrap(), m);
    }

    proptest! {
        #[test]
        fn matches_brute_force(seed in 0u64..1000, n in 2usize..60, m in 1usize..60, classes in 1usize..6, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_set(&mut rng, n, 3, classes);
            let mut g = random_set(&mut rng, m, 3, classes);
            if seed % 2 == 0 {
                // Distinct ids: a separate gallery.
                g.ids = (1000..1000 + m).collect();
            }
            let (ap, rec) = brute(&q, &g, k);
            match ap {
                Some(v) => prop_assert!((mean_average_precision(&q, &g).unwrap() - v).abs() < 1e-12),
                None => prop_assert!(mean_average_precision(&q, &g).is_err()),
            }
            if let Some(v) = rec {
                prop_assert!((recall_at_k(&q, &g, k).unwrap() - v).abs() < 1e-12);
            }
        }

        #[test]
        fn rotation_invariant(seed in 0u64..1000, angle in 0.0f64..6.28) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_set(&mut rng, 25, 2, 3);
            let g = random_set(&mut rng, 25, 2, 3);
            let (c, s) = (angle.cos(), angle.sin());
            let rotate = |e: &EmbeddingSet| {
                let data: Vec<f64> = e.matrix.data().chunks(2).flat_map(|v| [c * v[0] - s * v[1], s * v[0] + c * v[1]]).collect();
                EmbeddingSet::with_ids(&Tensor::new(vec![e.len(), 2], data).unwrap(), e.labels.clone(), e.ids.clone(), 1.0).unwrap()
            };
            let (rq, rg) = (rotate(&q), rotate(&g));
            // Rotation perturbs similarities by rounding only; compare with a tolerance.
            let a = mean_average_precision(&q, &g).unwrap();
            let b = mean_average_precision(&rq, &rg).unwrap();
            prop_assert!((a - b).abs() < 1e-9 || near_tie(&q, &g));
        }
    }

    /// Whether any two gallery similarities for some query are within
    /// rounding distance, where a rotation may legitimately flip the order.
    fn near_tie(q: &EmbeddingSet, g: &EmbeddingSet) -> bool {
        (0..q.len()).any(|i| {
            let mut s: Vec<f64> = (0..g.len()).map(|j| numerics::dot(q.matrix.row(i), g.matrix.row(j))).collect();
            s.sort_by(f64::total_cmp);
            s.windows(2).any(|w| w[1] - w[0] < 1e-12)
        })
    }
}
