//! Query path: retrieve the top-k preQs, group them by source passage, and
//! let the ranking model order the groups. Without the model (or when its
//! answer is unusable) groups are ordered by their best member's rank.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::prompts::{self, PromptTemplates};
use crate::gateway::ModelGateway;
use crate::index::{ScoredHit, VectorIndex};
use crate::preq::{ModalitySet, RetrievalPool};

/// Pools strictly larger than this retrieve [`K_LARGE_POOL`] preQs.
pub const LARGE_POOL_THRESHOLD: usize = 100_000;
pub const K_LARGE_POOL: usize = 100;
pub const K_DEFAULT: usize = 150;
pub const DEFAULT_GROUP_CAP: usize = 30;
pub const MAX_LLM_PASSAGES: usize = 5;

/// Number of preQs to retrieve for a pool of `pool_size` entries.
pub fn select_k(pool_size: usize) -> usize {
    if pool_size > LARGE_POOL_THRESHOLD {
        K_LARGE_POOL
    } else {
        K_DEFAULT
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRequest {
    pub query_text: String,
    pub top_passages: usize,
    pub use_qcluster: bool,
    pub modality_mask: ModalitySet,
    /// Most groups shown to the ranking model (best-ranked first).
    pub group_cap: usize,
    /// Retrieve this many preQs instead of [`select_k`].
    pub k_override: Option<usize>,
}

impl Default for QueryRequest {
    fn default() -> Self {
        QueryRequest {
            query_text: String::new(),
            top_passages: MAX_LLM_PASSAGES,
            use_qcluster: true,
            modality_mask: ModalitySet::ALL,
            group_cap: DEFAULT_GROUP_CAP,
            k_override: None,
        }
    }
}

impl QueryRequest {
    pub fn new(query_text: impl Into<String>) -> Self {
        QueryRequest {
            query_text: query_text.into(),
            ..Default::default()
        }
    }

    pub fn with_text(&self, query_text: impl Into<String>) -> Self {
        QueryRequest {
            query_text: query_text.into(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_text.trim().is_empty() {
            return Err(Error::Config("query text must not be empty".into()));
        }
        if self.top_passages == 0 {
            return Err(Error::Config("top_passages must be at least 1".into()));
        }
        if self.use_qcluster && self.top_passages > MAX_LLM_PASSAGES {
            return Err(Error::Config(format!(
                "top_passages must be at most {MAX_LLM_PASSAGES} when group ranking is on"
            )));
        }
        if self.group_cap == 0 {
            return Err(Error::Config("group_cap must be at least 1".into()));
        }
        if self.k_override == Some(0) {
            return Err(Error::Config("k override must be at least 1".into()));
        }
        if self.modality_mask.is_empty() {
            return Err(Error::Config("modality mask must not be empty".into()));
        }
        Ok(())
    }
}

/// Retrieved preQs sharing one source passage.
#[derive(Debug, Clone, PartialEq)]
pub struct PreQGroup {
    pub passage_id: String,
    /// Sorted by rank.
    pub members: Vec<ScoredHit>,
    pub best_rank: usize,
}

/// Groups ordered by ascending best rank.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroupSet {
    pub groups: Vec<PreQGroup>,
}

impl GroupSet {
    pub fn m(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }
}

pub fn group_by_passage(hits: &[ScoredHit], pool: &RetrievalPool) -> Result<GroupSet> {
    let mut slot: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<PreQGroup> = Vec::new();
    for hit in hits {
        let q = pool
            .get(&hit.preq_id)
            .ok_or_else(|| Error::UnknownPreq(hit.preq_id.clone()))?;
        let i = *slot.entry(q.source_passage_id.as_str()).or_insert_with(|| {
            groups.push(PreQGroup {
                passage_id: q.source_passage_id.clone(),
                members: Vec::new(),
                best_rank: usize::MAX,
            });
            groups.len() - 1
        });
        let g = &mut groups[i];
        g.best_rank = g.best_rank.min(hit.rank);
        g.members.push(hit.clone());
    }
    for g in &mut groups {
        g.members.sort_by_key(|h| h.rank);
    }
    groups.sort_by_key(|g| g.best_rank);
    Ok(GroupSet { groups })
}

/// The numbered group listing shown to the ranking model: `Group {n}:`
/// headers, one `  - question` line per member. Continuation lines of a
/// multi-line question are indented under it.
pub fn render_groups_text(groups: &[PreQGroup], pool: &RetrievalPool) -> String {
    let mut out = String::new();
    for (n, g) in groups.iter().enumerate() {
        if n > 0 {
            out.push('\n');
        }
        out.push_str(&format!("Group {}:", n + 1));
        for hit in &g.members {
            let text = pool.get(&hit.preq_id).map_or("", |q| q.text.as_str());
            let text = text
                .trim()
                .replace("\r\n", "\n")
                .replace('\r', "\n")
                .replace('\n', "\n    ");
            out.push_str("\n  - ");
            out.push_str(&text);
        }
    }
    out
}

/// The complete ranking prompt for `query` over `group_set`.
pub fn render_groups_prompt(
    query: &str,
    group_set: &GroupSet,
    pool: &RetrievalPool,
    templates: &PromptTemplates,
) -> String {
    let listing = render_groups_text(&group_set.groups, pool);
    prompts::render(
        &templates.rank,
        &[(prompts::SLOT_QUERY, query), (prompts::SLOT_QUESTIONS_TEXT, &listing)],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankingSource {
    Llm,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedPassage {
    pub passage_id: String,
    pub supporting_preq_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedPassages {
    pub passages: Vec<RankedPassage>,
    pub ranking_source: RankingSource,
}

impl RankedPassages {
    /// 1-based rank of the first passage in `gold`, if any.
    pub fn first_rank_of<'a>(&self, gold: impl IntoIterator<Item = &'a String> + Clone) -> Option<usize> {
        self.passages
            .iter()
            .position(|p| gold.clone().into_iter().any(|g| *g == p.passage_id))
            .map(|i| i + 1)
    }
}

fn ranked_from(group: &PreQGroup) -> RankedPassage {
    RankedPassage {
        passage_id: group.passage_id.clone(),
        supporting_preq_ids: group.members.iter().map(|h| h.preq_id.clone()).collect(),
    }
}

/// Passages in best-rank order, truncated to `limit`.
pub fn fallback_rank(group_set: &GroupSet, limit: usize) -> RankedPassages {
    RankedPassages {
        passages: group_set.groups.iter().take(limit).map(ranked_from).collect(),
        ranking_source: RankingSource::Fallback,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryOutcome {
    pub ranked: RankedPassages,
    pub k_used: usize,
    pub m_groups: usize,
}

/// Line-delimited query result record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub ranked: Vec<RankedPassage>,
    pub ranking_source: RankingSource,
    pub k_used: usize,
    pub m_groups: usize,
}

impl QueryRecord {
    pub fn new(query_id: impl Into<String>, outcome: QueryOutcome) -> Self {
        QueryRecord {
            query_id: query_id.into(),
            ranked: outcome.ranked.passages,
            ranking_source: outcome.ranked.ranking_source,
            k_used: outcome.k_used,
            m_groups: outcome.m_groups,
        }
    }
}

/// Answers one query against `index`, which must cover exactly the preQs
/// of `pool` admitted by the request's modality mask.
pub fn answer_query(
    request: &QueryRequest,
    index: &VectorIndex,
    pool: &RetrievalPool,
    gateway: &ModelGateway,
) -> Result<QueryOutcome> {
    request.validate()?;
    let query = gateway.embed_text(&request.query_text)?;
    let k = request.k_override.unwrap_or_else(|| select_k(index.len()));
    let hits = index.top_k(&query, k)?;
    let groups = group_by_passage(&hits, pool)?;
    let m_groups = groups.m();

    let ranked = if request.use_qcluster && !groups.is_empty() {
        let shown = &groups.groups[..m_groups.min(request.group_cap)];
        let listing = render_groups_text(shown, pool);
        match gateway.rank_groups_llm(&request.query_text, &listing, shown.len()) {
            Ok(order) => RankedPassages {
                passages: order
                    .into_iter()
                    .filter_map(|n| shown.get(n.wrapping_sub(1)))
                    .take(request.top_passages)
                    .map(ranked_from)
                    .collect(),
                ranking_source: RankingSource::Llm,
            },
            Err(e) => {
                tracing::warn!(error = %e, "group ranking failed; using retrieval order");
                fallback_rank(&groups, request.top_passages)
            }
        }
    } else {
        fallback_rank(&groups, request.top_passages)
    };

    Ok(QueryOutcome {
        ranked,
        k_used: k,
        m_groups,
    })
}

/// Pool, index and gateway bundled for querying.
#[derive(Debug)]
pub struct Engine<'g> {
    pub pool: RetrievalPool,
    pub index: VectorIndex,
    pub gateway: &'g ModelGateway,
}

impl<'g> Engine<'g> {
    pub fn new(pool: RetrievalPool, gateway: &'g ModelGateway) -> Result<Self> {
        let index = VectorIndex::build(&pool)?;
        Ok(Engine { pool, index, gateway })
    }

    pub fn from_parts(pool: RetrievalPool, index: VectorIndex, gateway: &'g ModelGateway) -> Self {
        Engine { pool, index, gateway }
    }

    /// An engine over only the preQs whose modality is in `mask`.
    pub fn restricted(&self, mask: ModalitySet) -> Engine<'g> {
        let pool = self.pool.filter(mask);
        let index = self.index.filtered(|id| pool.get(id).is_some());
        Engine {
            pool,
            index,
            gateway: self.gateway,
        }
    }

    fn covers_only(&self, mask: ModalitySet) -> bool {
        self.pool.preqs().iter().all(|q| mask.contains(q.modality))
    }

    /// Answers `request`, restricting to its modality mask when needed.
    pub fn answer(&self, request: &QueryRequest) -> Result<QueryOutcome> {
        if self.covers_only(request.modality_mask) {
            answer_query(request, &self.index, &self.pool, self.gateway)
        } else {
            let sub = self.restricted(request.modality_mask);
            answer_query(request, &sub.index, &sub.pool, self.gateway)
        }
    }
}
