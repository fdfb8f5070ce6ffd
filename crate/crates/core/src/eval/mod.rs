//! Retrieval metrics, evaluation runs, ablations and pool analyses.

pub mod coverage;
pub mod dbscan;
pub mod redundancy;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use coverage::{coverage_sweep, CoverageReport};
pub use dbscan::{dbscan_cluster_count, dbscan_labels};
pub use redundancy::{redundancy_analysis, RedundancyReport};

use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::gateway::ModelGateway;
use crate::preq::{ModalitySet, RetrievalPool};
use crate::qcluster::{Engine, QueryRecord, QueryRequest};

pub const RECALL_CUTOFFS: [usize; 3] = [1, 3, 5];
pub const MRR_CUTOFF: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalQuery {
    pub query_id: String,
    pub query_text: String,
    pub gold_passage_ids: BTreeSet<String>,
}

/// Reads a JSONL evaluation set. With a corpus, every gold id must exist.
pub fn load_eval_set(path: impl AsRef<Path>, corpus: Option<&Corpus>) -> Result<Vec<EvalQuery>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let q: EvalQuery = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if q.gold_passage_ids.is_empty() {
            return Err(bad(format!("query `{}` has no gold passages", q.query_id)));
        }
        if q.query_text.trim().is_empty() {
            return Err(bad(format!("query `{}` has empty text", q.query_id)));
        }
        if !seen.insert(q.query_id.clone()) {
            return Err(bad(format!("duplicate query id `{}`", q.query_id)));
        }
        if let Some(corpus) = corpus {
            if let Some(g) = q.gold_passage_ids.iter().find(|g| corpus.passage(g).is_none()) {
                return Err(Error::UnknownGoldPassage {
                    query_id: q.query_id.clone(),
                    passage_id: g.clone(),
                });
            }
        }
        out.push(q);
    }
    Ok(out)
}

pub fn write_eval_set(queries: &[EvalQuery], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(queries, path.as_ref())
}

pub(crate) fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("plain data serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Fraction of queries whose first relevant rank is at most `k`.
pub fn recall_at_k(ranks: &[Option<usize>], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count() as f64 / ranks.len() as f64
}

/// Mean reciprocal rank, counting ranks beyond `k` as zero.
pub fn mrr_at_k(ranks: &[Option<usize>], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks
        .iter()
        .map(|r| match r {
            Some(r) if *r <= k => 1.0 / *r as f64,
            _ => 0.0,
        })
        .sum::<f64>()
        / ranks.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    /// 1-based rank of the first gold passage; absent when not retrieved.
    pub first_relevant_rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub mrr_at_5: f64,
    pub per_query: Vec<QueryResult>,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> f64 {
        self.recall_at.get(&k).copied().unwrap_or(0.0)
    }

    pub fn ranks(&self) -> Vec<Option<usize>> {
        self.per_query.iter().map(|q| q.first_relevant_rank).collect()
    }

    fn from_results(mut per_query: Vec<QueryResult>, config_fingerprint: String) -> Self {
        per_query.sort_by(|a, b| a.query_id.cmp(&b.query_id));
        let ranks: Vec<_> = per_query.iter().map(|q| q.first_relevant_rank).collect();
        EvalReport {
            recall_at: RECALL_CUTOFFS.iter().map(|&k| (k, recall_at_k(&ranks, k))).collect(),
            mrr_at_5: mrr_at_k(&ranks, MRR_CUTOFF),
            per_query,
            config_fingerprint,
        }
    }
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("plain data serializes");
    hex::encode(Sha256::digest(json))
}

#[derive(Serialize)]
struct EvalSettings<'a> {
    request: &'a QueryRequest,
    provider: &'a crate::gateway::ProviderConfig,
    pool_size: usize,
    dimension: usize,
}

/// Per-query results from running `queries` through `engine` with the
/// settings of `template` (its query text is ignored).
pub fn evaluate(
    queries: &[EvalQuery],
    template: &QueryRequest,
    engine: &Engine<'_>,
) -> Result<(EvalReport, Vec<QueryRecord>)> {
    if queries.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let restricted;
    let engine = if engine
        .pool
        .preqs()
        .iter()
        .all(|q| template.modality_mask.contains(q.modality))
    {
        engine
    } else {
        restricted = engine.restricted(template.modality_mask);
        &restricted
    };
    let outcomes = crate::par::map(queries, |q| engine.answer(&template.with_text(&q.query_text)));
    let mut results = Vec::with_capacity(queries.len());
    let mut records = Vec::with_capacity(queries.len());
    for (q, outcome) in queries.iter().zip(outcomes) {
        match outcome {
            Ok(o) => {
                results.push(QueryResult {
                    query_id: q.query_id.clone(),
                    first_relevant_rank: o.ranked.first_rank_of(&q.gold_passage_ids),
                    error: None,
                });
                records.push(QueryRecord::new(&q.query_id, o));
            }
            Err(e @ Error::Config(_)) => return Err(e),
            Err(e) => {
                tracing::warn!(query = %q.query_id, error = %e, "query failed");
                results.push(QueryResult {
                    query_id: q.query_id.clone(),
                    first_relevant_rank: None,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    records.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    let settings = EvalSettings {
        request: &template.with_text(""),
        provider: engine.gateway.config(),
        pool_size: engine.pool.len(),
        dimension: engine.index.dimension(),
    };
    Ok((EvalReport::from_results(results, fingerprint(&settings)), records))
}

pub fn run_eval(queries: &[EvalQuery], template: &QueryRequest, engine: &Engine<'_>) -> Result<EvalReport> {
    evaluate(queries, template, engine).map(|(r, _)| r)
}

/// One evaluation per non-empty modality subset.
pub fn modality_ablation(
    queries: &[EvalQuery],
    template: &QueryRequest,
    engine: &Engine<'_>,
) -> Result<Vec<(ModalitySet, EvalReport)>> {
    ModalitySet::non_empty_subsets()
        .into_iter()
        .map(|mask| {
            let request = QueryRequest {
                modality_mask: mask,
                ..template.clone()
            };
            Ok((mask, run_eval(queries, &request, engine)?))
        })
        .collect()
}

/// Evaluations with and without LLM group ranking.
pub fn qcluster_ablation(
    queries: &[EvalQuery],
    template: &QueryRequest,
    engine: &Engine<'_>,
) -> Result<(EvalReport, EvalReport)> {
    let with = QueryRequest {
        use_qcluster: true,
        ..template.clone()
    };
    let without = QueryRequest {
        use_qcluster: false,
        ..template.clone()
    };
    Ok((run_eval(queries, &with, engine)?, run_eval(queries, &without, engine)?))
}

/// Evaluations over pools capped to each `n` questions per source.
pub fn n_sweep(
    queries: &[EvalQuery],
    template: &QueryRequest,
    pool: &RetrievalPool,
    gateway: &ModelGateway,
    n_values: &[usize],
) -> Result<Vec<(usize, EvalReport)>> {
    n_values
        .iter()
        .map(|&n| {
            if n == 0 {
                return Err(Error::Config("n values must be at least 1".into()));
            }
            let engine = Engine::new(pool.cap_per_source(n), gateway)?;
            Ok((n, run_eval(queries, template, &engine)?))
        })
        .collect()
}

/// Re-embeds `pool` with each gateway and evaluates with it, so both the
/// embedding model and the ranking model vary per entry.
pub fn provider_sweep<'a>(
    queries: &[EvalQuery],
    template: &QueryRequest,
    pool: &RetrievalPool,
    gateways: &'a [(String, ModelGateway)],
) -> Result<Vec<(&'a str, EvalReport)>> {
    gateways
        .iter()
        .map(|(label, gw)| {
            let mut pool = pool.clone();
            pool.embed(gw)?;
            let engine = Engine::new(pool, gw)?;
            Ok((label.as_str(), run_eval(queries, template, &engine)?))
        })
        .collect()
}

/// Plain-text metrics table, one row per labelled report.
pub fn format_metrics_table<'a>(rows: impl IntoIterator<Item = (String, &'a EvalReport)>) -> String {
    let rows: Vec<(String, &EvalReport)> = rows.into_iter().collect();
    let width = rows
        .iter()
        .map(|(l, _)| l.len())
        .max()
        .unwrap_or(0)
        .max("setting".len());
    let mut out = format!(
        "{:<width$}  {:>8}  {:>8}  {:>8}  {:>6}\n",
        "setting", "R@1", "R@3", "R@5", "MRR@5"
    );
    for (label, r) in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}  {:>6.4}",
            label,
            r.recall(1),
            r.recall(3),
            r.recall(5),
            r.mrr_at_5
        );
    }
    out
}

/// Writes one TSV row per preQ: id, modality, passage, then the vector.
pub fn export_embeddings(pool: &RetrievalPool, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for q in pool.preqs() {
        let emb = q
            .embedding
            .as_ref()
            .ok_or_else(|| Error::MissingEmbedding(q.id.clone()))?;
        let values: Vec<String> = emb.values().iter().map(|v| v.to_string()).collect();
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            q.id,
            q.modality,
            q.source_passage_id,
            values.join(" ")
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
