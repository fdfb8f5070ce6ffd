//! Pairwise preQ redundancy: the share of unordered pairs whose cosine
//! similarity reaches each threshold, within one passage, within one
//! document, and across the whole pool.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::dot;
use crate::preq::RetrievalPool;

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    /// Percentage of same-passage pairs at or above the threshold.
    pub within_passage_pct: f64,
    /// Percentage of same-document pairs; absent without a document map.
    pub within_document_pct: Option<f64>,
    pub across_all_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyReport {
    pub rows: Vec<ThresholdRow>,
    pub pairs_within_passage: u64,
    pub pairs_within_document: Option<u64>,
    pub pairs_total: u64,
}

/// Raw pair counts; index `t` of each count vector matches `thresholds[t]`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairCounts {
    pub total: u64,
    pub same_passage: u64,
    pub same_document: u64,
    pub above_all: Vec<u64>,
    pub above_passage: Vec<u64>,
    pub above_document: Vec<u64>,
}

impl PairCounts {
    fn zero(t: usize) -> Self {
        PairCounts {
            above_all: vec![0; t],
            above_passage: vec![0; t],
            above_document: vec![0; t],
            ..Default::default()
        }
    }

    fn add(mut self, other: PairCounts) -> Self {
        self.total += other.total;
        self.same_passage += other.same_passage;
        self.same_document += other.same_document;
        for (a, b) in [
            (&mut self.above_all, other.above_all),
            (&mut self.above_passage, other.above_passage),
            (&mut self.above_document, other.above_document),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self
    }
}

struct Points<'a> {
    vectors: Vec<&'a [f32]>,
    passage: Vec<usize>,
    document: Vec<usize>,
}

fn points<'a>(pool: &'a RetrievalPool, document_of: Option<&HashMap<String, String>>) -> Result<Points<'a>> {
    let mut passage_ids: HashMap<&str, usize> = HashMap::new();
    let mut document_ids: HashMap<&str, usize> = HashMap::new();
    let mut pts = Points {
        vectors: Vec::with_capacity(pool.len()),
        passage: Vec::with_capacity(pool.len()),
        document: Vec::with_capacity(pool.len()),
    };
    for q in pool.preqs() {
        let emb = q
            .embedding
            .as_ref()
            .ok_or_else(|| Error::MissingEmbedding(q.id.clone()))?;
        pts.vectors.push(emb.values());
        let n = passage_ids.len();
        pts.passage
            .push(*passage_ids.entry(q.source_passage_id.as_str()).or_insert(n));
        let doc = document_of
            .and_then(|m| m.get(&q.source_passage_id))
            .map_or(q.source_passage_id.as_str(), String::as_str);
        let n = document_ids.len();
        pts.document.push(*document_ids.entry(doc).or_insert(n));
    }
    Ok(pts)
}

fn count_row(pts: &Points<'_>, i: usize, thresholds: &[f64]) -> PairCounts {
    let mut c = PairCounts::zero(thresholds.len());
    for j in i + 1..pts.vectors.len() {
        let s = dot(pts.vectors[i], pts.vectors[j]);
        let same_p = pts.passage[i] == pts.passage[j];
        let same_d = pts.document[i] == pts.document[j];
        c.total += 1;
        c.same_passage += u64::from(same_p);
        c.same_document += u64::from(same_d);
        for (t, &th) in thresholds.iter().enumerate() {
            if s >= th {
                c.above_all[t] += 1;
                c.above_passage[t] += u64::from(same_p);
                c.above_document[t] += u64::from(same_d);
            }
        }
    }
    c
}

/// Exact pair counts, rows scanned in parallel when enabled.
pub fn pair_counts(
    pool: &RetrievalPool,
    thresholds: &[f64],
    document_of: Option<&HashMap<String, String>>,
) -> Result<PairCounts> {
    let pts = points(pool, document_of)?;
    let rows = crate::par::map_range(pts.vectors.len(), |i| count_row(&pts, i, thresholds));
    Ok(rows
        .into_iter()
        .fold(PairCounts::zero(thresholds.len()), PairCounts::add))
}

/// Single-threaded variant of [`pair_counts`].
pub fn pair_counts_sequential(
    pool: &RetrievalPool,
    thresholds: &[f64],
    document_of: Option<&HashMap<String, String>>,
) -> Result<PairCounts> {
    let pts = points(pool, document_of)?;
    Ok((0..pts.vectors.len())
        .map(|i| count_row(&pts, i, thresholds))
        .fold(PairCounts::zero(thresholds.len()), PairCounts::add))
}

fn pct(n: u64, d: u64) -> f64 {
    if d == 0 {
        0.0
    } else {
        100.0 * n as f64 / d as f64
    }
}

pub fn redundancy_analysis(
    pool: &RetrievalPool,
    thresholds: &[f64],
    document_of: Option<&HashMap<String, String>>,
) -> Result<RedundancyReport> {
    if pool.len() < 2 {
        tracing::warn!(size = pool.len(), "pool too small for pairwise redundancy");
    }
    let c = pair_counts(pool, thresholds, document_of)?;
    let rows = thresholds
        .iter()
        .enumerate()
        .map(|(t, &threshold)| ThresholdRow {
            threshold,
            within_passage_pct: pct(c.above_passage[t], c.same_passage),
            within_document_pct: document_of.map(|_| pct(c.above_document[t], c.same_document)),
            across_all_pct: pct(c.above_all[t], c.total),
        })
        .collect();
    Ok(RedundancyReport {
        rows,
        pairs_within_passage: c.same_passage,
        pairs_within_document: document_of.map(|_| c.same_document),
        pairs_total: c.total,
    })
}
