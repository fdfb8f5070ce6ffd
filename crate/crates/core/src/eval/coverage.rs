//! Semantic coverage: mean number of DBSCAN clusters per passage as the
//! per-source question cap grows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::dbscan::dbscan_cluster_count;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::preq::RetrievalPool;

pub const DEFAULT_N_VALUES: [usize; 5] = [10, 20, 30, 40, 50];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub eps: f64,
    pub min_pts: usize,
    /// Mean cluster count per passage, keyed by the per-source cap.
    pub avg_cluster_count: BTreeMap<usize, f64>,
}

/// Clusters in each passage's preQs after capping `pool` to `n` per source.
/// Passages without preQs count as zero clusters.
pub fn passage_cluster_counts(
    corpus: &Corpus,
    pool: &RetrievalPool,
    n: usize,
    eps: f64,
    min_pts: usize,
) -> Result<BTreeMap<String, usize>> {
    let capped = pool.cap_per_source(n);
    let passages: Vec<&str> = corpus.passages().map(|p| p.id.as_str()).collect();
    let counts = crate::par::map(&passages, |pid| -> Result<usize> {
        let Some(ids) = capped.by_passage().get(*pid) else {
            return Ok(0);
        };
        let mut points = Vec::with_capacity(ids.len());
        for id in ids {
            let q = capped.get(id).ok_or_else(|| Error::UnknownPreq(id.clone()))?;
            let emb = q
                .embedding
                .as_ref()
                .ok_or_else(|| Error::MissingEmbedding(id.clone()))?;
            points.push(emb.values());
        }
        dbscan_cluster_count(&points, eps, min_pts)
    });
    passages
        .into_iter()
        .zip(counts)
        .map(|(p, c)| Ok((p.to_string(), c?)))
        .collect()
}

/// Sweeps the per-source cap over `n_values`. Each cap keeps the first `n`
/// questions of every source in `pool`, so `pool` should be generated with
/// a cap of at least the largest value.
pub fn coverage_sweep(
    corpus: &Corpus,
    pool: &RetrievalPool,
    n_values: &[usize],
    eps: f64,
    min_pts: usize,
) -> Result<CoverageReport> {
    if n_values.contains(&0) {
        return Err(Error::Config("coverage n values must be at least 1".into()));
    }
    let total = corpus.num_passages();
    let mut avg = BTreeMap::new();
    for &n in n_values {
        let counts = passage_cluster_counts(corpus, pool, n, eps, min_pts)?;
        let sum: usize = counts.values().sum();
        avg.insert(n, if total == 0 { 0.0 } else { sum as f64 / total as f64 });
    }
    Ok(CoverageReport {
        eps,
        min_pts,
        avg_cluster_count: avg,
    })
}
