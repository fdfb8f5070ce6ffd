//! Pre-question generation and the retrieval pool.
//!
//! Each page yields up to three question sets: multimodal (from the page
//! image), visual (one set per component image) and textual (from the
//! layout-ordered text surrogate). The pool is their union. Every set is
//! deduplicated and capped at `max_questions_per_source` independently.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Passage};
use crate::error::{Error, Result};
use crate::gateway::{EmbeddingVector, ImageInput, ModelGateway, PromptKind, QuestionPayload};
use crate::index::codec;
use crate::par;

pub const PREQ_STORE_FILE: &str = "preqs.jsonl";
pub const PREQ_EMBEDDINGS_FILE: &str = "preq_embeddings.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    /// Whole page image.
    M,
    /// Individual component image.
    V,
    /// Text surrogate.
    T,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::M, Modality::V, Modality::T];

    fn bit(self) -> u8 {
        match self {
            Modality::M => 1,
            Modality::V => 2,
            Modality::T => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::M => "M",
            Modality::V => "V",
            Modality::T => "T",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A subset of {M, V, T}.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const ALL: ModalitySet = ModalitySet(7);
    pub const EMPTY: ModalitySet = ModalitySet(0);

    pub fn only(m: Modality) -> Self {
        ModalitySet(m.bit())
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & m.bit() != 0
    }

    pub fn with(self, m: Modality) -> Self {
        ModalitySet(self.0 | m.bit())
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn is_subset(self, other: ModalitySet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |m| self.contains(*m))
    }

    /// The seven non-empty subsets, singletons first.
    pub fn non_empty_subsets() -> Vec<ModalitySet> {
        let mut all: Vec<ModalitySet> = (1u8..8).map(ModalitySet).collect();
        all.sort_by_key(|s| (s.0.count_ones(), s.iter().map(Modality::bit).collect::<Vec<_>>()));
        all
    }
}

impl FromIterator<Modality> for ModalitySet {
    fn from_iter<I: IntoIterator<Item = Modality>>(iter: I) -> Self {
        iter.into_iter().fold(ModalitySet::EMPTY, ModalitySet::with)
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self.iter().map(Modality::as_str).collect();
        f.write_str(&parts.join("+"))
    }
}

impl fmt::Debug for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ModalitySet({self})")
    }
}

impl FromStr for ModalitySet {
    type Err = Error;

    /// Parses lists such as `m,v,t`, `M+T` or `mvt`.
    fn from_str(s: &str) -> Result<Self> {
        let mut set = ModalitySet::EMPTY;
        for c in s.chars().filter(|c| !matches!(c, ',' | '+' | ' ')) {
            let m = match c.to_ascii_uppercase() {
                'M' => Modality::M,
                'V' => Modality::V,
                'T' => Modality::T,
                _ => return Err(Error::Config(format!("unknown modality `{c}` in `{s}`"))),
            };
            set = set.with(m);
        }
        if set.is_empty() {
            return Err(Error::Config("modality set must not be empty".into()));
        }
        Ok(set)
    }
}

impl Serialize for ModalitySet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let parts: Vec<&str> = self.iter().map(Modality::as_str).collect();
        s.serialize_str(&parts.join(","))
    }
}

impl<'de> Deserialize<'de> for ModalitySet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreQ {
    pub id: String,
    pub text: String,
    pub modality: Modality,
    pub source_passage_id: String,
    /// Set exactly for visual preQs.
    pub source_component_id: Option<String>,
    pub embedding: Option<EmbeddingVector>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub max_questions_per_source: usize,
    pub modalities_enabled: ModalitySet,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_questions_per_source: 50,
            modalities_enabled: ModalitySet::ALL,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_questions_per_source == 0 {
            return Err(Error::Config("max_questions_per_source must be at least 1".into()));
        }
        if self.modalities_enabled.is_empty() {
            return Err(Error::Config("at least one modality must be enabled".into()));
        }
        Ok(())
    }
}

/// Drops exact duplicates (first occurrence wins) and keeps the first `n`.
pub fn dedupe_and_cap(questions: Vec<String>, n: usize) -> Vec<String> {
    let mut seen = HashSet::new();
    questions
        .into_iter()
        .filter(|q| seen.insert(q.clone()))
        .take(n)
        .collect()
}

pub fn preq_id(passage_id: &str, modality: Modality, component_id: Option<&str>, ordinal: usize) -> String {
    match component_id {
        Some(c) => format!("{passage_id}:{modality}:{c}:{ordinal}"),
        None => format!("{passage_id}:{modality}:{ordinal}"),
    }
}

/// Output of generation for one passage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PassageGeneration {
    pub preqs: Vec<PreQ>,
    pub warnings: Vec<String>,
    /// Generation requests made, successful or not.
    pub requests: usize,
}

impl PassageGeneration {
    pub fn is_partial(&self) -> bool {
        !self.warnings.is_empty()
    }
}

/// Generates the enabled question sets for one passage. Image references
/// are passed to the gateway as written.
pub fn generate_for_passage(passage: &Passage, config: &GenConfig, gateway: &ModelGateway) -> PassageGeneration {
    generate_resolved(passage, config, gateway, &|raw| raw.to_string())
}

fn generate_resolved(
    passage: &Passage,
    config: &GenConfig,
    gateway: &ModelGateway,
    resolve: &(dyn Fn(&str) -> String + Sync),
) -> PassageGeneration {
    let n = config.max_questions_per_source;
    let mut out = PassageGeneration::default();
    let emit = |out: &mut PassageGeneration,
                modality: Modality,
                component: Option<&str>,
                result: std::result::Result<Vec<String>, crate::gateway::GatewayError>| {
        out.requests += 1;
        match result {
            Ok(questions) => {
                for (ordinal, text) in dedupe_and_cap(questions, n).into_iter().enumerate() {
                    out.preqs.push(PreQ {
                        id: preq_id(&passage.id, modality, component, ordinal),
                        text,
                        modality,
                        source_passage_id: passage.id.clone(),
                        source_component_id: component.map(str::to_string),
                        embedding: None,
                    });
                }
            }
            Err(e) => {
                let source = component.map_or_else(|| modality.to_string(), |c| format!("{modality}:{c}"));
                tracing::warn!(passage = %passage.id, %source, error = %e, "question generation failed");
                out.warnings.push(format!("{source}: {e}"));
            }
        }
    };

    let enabled = config.modalities_enabled;
    if enabled.contains(Modality::M) {
        let image = ImageInput::new(&passage.page_image_ref, resolve(&passage.page_image_ref));
        let r = gateway.generate_questions(PromptKind::Multimodal, QuestionPayload::Image(&image), n);
        emit(&mut out, Modality::M, None, r);
    }
    if enabled.contains(Modality::V) {
        for c in &passage.components {
            let image = ImageInput::new(&c.image_ref, resolve(&c.image_ref));
            let r = gateway.generate_questions(PromptKind::Visual, QuestionPayload::Image(&image), n);
            emit(&mut out, Modality::V, Some(&c.id), r);
        }
    }
    if enabled.contains(Modality::T) {
        let text = passage.surrogate();
        if !text.trim().is_empty() {
            let r = gateway.generate_questions(PromptKind::Textual, QuestionPayload::Text(&text), n);
            emit(&mut out, Modality::T, None, r);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassageReport {
    pub passage_id: String,
    pub multimodal: usize,
    pub visual: usize,
    pub textual: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Per-passage counts and warnings from a pool build.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub passages: Vec<PassageReport>,
    pub partial_passages: usize,
    pub total_preqs: usize,
}

/// The searchable set of preQs, in canonical (corpus) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RetrievalPool {
    preqs: Vec<PreQ>,
    by_passage: BTreeMap<String, Vec<String>>,
    positions: HashMap<String, usize>,
}

impl RetrievalPool {
    pub fn from_preqs(preqs: Vec<PreQ>) -> Result<Self> {
        let mut positions = HashMap::with_capacity(preqs.len());
        let mut by_passage: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (i, q) in preqs.iter().enumerate() {
            if q.id.contains(['\n', '\r']) {
                return Err(Error::InvalidCorpus(format!("preQ id {:?} contains a newline", q.id)));
            }
            if positions.insert(q.id.clone(), i).is_some() {
                return Err(Error::InvalidCorpus(format!("duplicate preQ id `{}`", q.id)));
            }
            if q.source_component_id.is_some() != (q.modality == Modality::V) {
                return Err(Error::InvalidCorpus(format!(
                    "preQ `{}`: component id must be present exactly for visual preQs",
                    q.id
                )));
            }
            by_passage
                .entry(q.source_passage_id.clone())
                .or_default()
                .push(q.id.clone());
        }
        Ok(RetrievalPool {
            preqs,
            by_passage,
            positions,
        })
    }

    pub fn preqs(&self) -> &[PreQ] {
        &self.preqs
    }

    pub fn by_passage(&self) -> &BTreeMap<String, Vec<String>> {
        &self.by_passage
    }

    pub fn len(&self) -> usize {
        self.preqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.preqs.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&PreQ> {
        self.positions.get(id).map(|&i| &self.preqs[i])
    }

    /// The preQs whose modality is in `mask`, order preserved.
    pub fn filter(&self, mask: ModalitySet) -> RetrievalPool {
        let kept = self
            .preqs
            .iter()
            .filter(|q| mask.contains(q.modality))
            .cloned()
            .collect();
        RetrievalPool::from_preqs(kept).expect("a subset of a valid pool is valid")
    }

    /// Keeps the first `n` preQs of every generation source.
    pub fn cap_per_source(&self, n: usize) -> RetrievalPool {
        let mut counts: HashMap<(String, Modality, Option<String>), usize> = HashMap::new();
        let kept = self
            .preqs
            .iter()
            .filter(|q| {
                let key = (q.source_passage_id.clone(), q.modality, q.source_component_id.clone());
                let c = counts.entry(key).or_default();
                *c += 1;
                *c <= n
            })
            .cloned()
            .collect();
        RetrievalPool::from_preqs(kept).expect("a subset of a valid pool is valid")
    }

    /// Embeds every preQ (replacing existing embeddings).
    pub fn embed(&mut self, gateway: &ModelGateway) -> Result<()> {
        let texts: Vec<String> = self.preqs.iter().map(|q| q.text.clone()).collect();
        let batches: Vec<&[String]> = texts.chunks(gateway.config().embed_batch_size.max(1)).collect();
        let results = par::map(&batches, |batch| gateway.embed_texts(batch));
        let mut vectors = Vec::with_capacity(texts.len());
        for r in results {
            vectors.extend(r?);
        }
        if let (Some(first), Some(bad)) = (
            vectors.first(),
            vectors.iter().find(|v| v.dimension() != vectors[0].dimension()),
        ) {
            return Err(Error::DimensionMismatch {
                expected: first.dimension(),
                found: bad.dimension(),
            });
        }
        for (q, v) in self.preqs.iter_mut().zip(vectors) {
            q.embedding = Some(v);
        }
        Ok(())
    }
}

/// Generates and embeds the full pool for `corpus`. Passages run in
/// parallel; the pool is assembled in corpus order.
pub fn build_pool(corpus: &Corpus, config: &GenConfig, gateway: &ModelGateway) -> Result<(RetrievalPool, RunReport)> {
    config.validate()?;
    let passages: Vec<&Passage> = corpus.passages().collect();
    let resolve = |raw: &str| corpus.resolve_ref(raw);
    let generated = par::map(&passages, |p| generate_resolved(p, config, gateway, &resolve));

    let requests: usize = generated.iter().map(|g| g.requests).sum();
    let failures: usize = generated.iter().map(|g| g.warnings.len()).sum();
    if requests > 0 && failures == requests {
        let first = generated
            .iter()
            .flat_map(|g| g.warnings.first())
            .next()
            .cloned()
            .unwrap_or_default();
        return Err(Error::ProviderFailure {
            stage: "generation",
            first,
        });
    }

    let mut report = RunReport::default();
    let mut preqs = Vec::new();
    for (p, g) in passages.iter().zip(generated) {
        let count = |m| g.preqs.iter().filter(|q| q.modality == m).count();
        report.passages.push(PassageReport {
            passage_id: p.id.clone(),
            multimodal: count(Modality::M),
            visual: count(Modality::V),
            textual: count(Modality::T),
            warnings: g.warnings.clone(),
        });
        if g.is_partial() {
            report.partial_passages += 1;
        }
        preqs.extend(g.preqs);
    }
    report.total_preqs = preqs.len();

    let mut pool = RetrievalPool::from_preqs(preqs)?;
    pool.embed(gateway)?;
    Ok((pool, report))
}

#[derive(Serialize, Deserialize)]
struct StoreRecord {
    id: String,
    text: String,
    modality: Modality,
    source_passage_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    source_component_id: Option<String>,
}

/// Writes `preqs.jsonl` and, when every preQ is embedded, the embedding sidecar.
pub fn write_store(pool: &RetrievalPool, dir: &Path) -> Result<()> {
    let path = dir.join(PREQ_STORE_FILE);
    let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    for q in &pool.preqs {
        let rec = StoreRecord {
            id: q.id.clone(),
            text: q.text.clone(),
            modality: q.modality,
            source_passage_id: q.source_passage_id.clone(),
            source_component_id: q.source_component_id.clone(),
        };
        let line = serde_json::to_string(&rec).expect("store record serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;

    let vectors: Option<Vec<&[f32]>> = pool
        .preqs
        .iter()
        .map(|q| q.embedding.as_ref().map(EmbeddingVector::values))
        .collect();
    if let Some(vectors) = vectors {
        let dim = vectors.first().map_or(0, |v| v.len());
        let flat: Vec<f32> = vectors.concat();
        codec::write_vectors(&dir.join(PREQ_EMBEDDINGS_FILE), dim, &flat)?;
    }
    Ok(())
}

/// Reads a store written by [`write_store`], attaching embeddings when the
/// sidecar exists.
pub fn read_store(dir: &Path) -> Result<RetrievalPool> {
    let path = dir.join(PREQ_STORE_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact {
            artifact: "preQ store",
            command: "generate",
        });
    }
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut preqs = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StoreRecord = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.clone(),
            line: n + 1,
            message: e.to_string(),
        })?;
        preqs.push(PreQ {
            id: rec.id,
            text: rec.text,
            modality: rec.modality,
            source_passage_id: rec.source_passage_id,
            source_component_id: rec.source_component_id,
            embedding: None,
        });
    }

    let emb_path = dir.join(PREQ_EMBEDDINGS_FILE);
    if emb_path.exists() {
        let (dim, flat) = codec::read_vectors(&emb_path)?;
        let count = flat.len().checked_div(dim).unwrap_or(0);
        if count != preqs.len() {
            return Err(Error::CorruptIndex {
                path: emb_path,
                message: format!("{count} vectors for {} preQs", preqs.len()),
            });
        }
        for (q, chunk) in preqs.iter_mut().zip(flat.chunks_exact(dim.max(1))) {
            q.embedding = Some(EmbeddingVector::from_unit(chunk.to_vec()));
        }
    }
    RetrievalPool::from_preqs(preqs)
}
