//! Seeded synthetic corpora for offline runs.
//!
//! Every passage carries one keyword that appears nowhere else, and the eval
//! set asks for each keyword alone. Keywords are drawn so that, under the
//! mock backend's hashed-bag embedding, no other token in the corpus or in
//! the mock's generated questions lands in a keyword's bucket. The gold
//! passage is then the only one whose preQs score above zero.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_manifest, Component, ComponentKind, Corpus, Document, OcrBlock, Passage};
use crate::error::{Error, Result};
use crate::eval::{write_eval_set, EvalQuery};
use crate::gateway::mock::{token_bucket, DEFAULT_MOCK_DIM};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const QUERIES_FILE: &str = "queries.jsonl";

const FILLER: [&str; 24] = [
    "annual", "report", "budget", "growth", "region", "sales", "summary", "quarter", "market", "revenue", "forecast",
    "segment", "total", "margin", "policy", "review", "figure", "table", "index", "trend", "survey", "value", "share",
    "data",
];

const KINDS: [ComponentKind; 4] = [
    ComponentKind::Figure,
    ComponentKind::Table,
    ComponentKind::Chart,
    ComponentKind::Diagram,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub documents: usize,
    pub pages_per_document: usize,
    pub components_per_page: usize,
    pub filler_words: usize,
    pub seed: u64,
    /// Bucket count of the mock embedding the keywords must stay unique in.
    pub dimension: usize,
    /// Highest `[n]` ordinal the mock may append to a question.
    pub max_ordinal: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            documents: 4,
            pages_per_document: 3,
            components_per_page: 1,
            filler_words: 6,
            seed: 0,
            dimension: DEFAULT_MOCK_DIM,
            max_ordinal: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub queries: Vec<EvalQuery>,
    /// Passage id to its keyword.
    pub keywords: BTreeMap<String, String>,
}

fn page_ref(doc: usize, page: usize) -> String {
    format!("synthetic://d{doc:03}/p{page}.png")
}

fn component_ref(doc: usize, page: usize, c: usize) -> String {
    format!("synthetic://d{doc:03}/p{page}/c{c}.png")
}

fn kind_of(c: usize) -> ComponentKind {
    KINDS[c % KINDS.len()]
}

/// Buckets of every non-keyword token the corpus or the mock can produce.
fn reserved_buckets(config: &SynthConfig) -> HashSet<usize> {
    let mut tokens: Vec<String> = FILLER.iter().map(|s| s.to_string()).collect();
    tokens.extend(["page", "component", "of"].map(String::from));
    tokens.extend(KINDS.iter().map(|k| format!("[{k}]")));
    tokens.extend((1..=config.max_ordinal).map(|i| format!("[{i}]")));
    for d in 0..config.documents {
        for p in 0..config.pages_per_document {
            tokens.push(page_ref(d, p));
            tokens.extend((0..config.components_per_page).map(|c| component_ref(d, p, c)));
        }
    }
    tokens.iter().map(|t| token_bucket(t, config.dimension)).collect()
}

fn draw_keyword(rng: &mut ChaCha8Rng, taken: &mut HashSet<usize>, dimension: usize) -> Option<String> {
    for _ in 0..10_000 {
        let word: String = (0..9).map(|_| char::from(b'a' + rng.gen_range(0..26u8))).collect();
        let bucket = token_bucket(&word, dimension);
        if taken.insert(bucket) {
            return Some(word);
        }
    }
    None
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SyntheticCorpus> {
    if config.documents == 0 || config.pages_per_document == 0 {
        return Err(Error::Config("a synthetic corpus needs at least one page".into()));
    }
    if config.dimension == 0 {
        return Err(Error::Config("synthetic dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut taken = reserved_buckets(config);
    let mut keywords = BTreeMap::new();
    let mut queries = Vec::new();
    let mut documents = Vec::with_capacity(config.documents);

    for d in 0..config.documents {
        let mut passages = Vec::with_capacity(config.pages_per_document);
        for p in 0..config.pages_per_document {
            let id = format!("d{d:03}/p{p}");
            let keyword = draw_keyword(&mut rng, &mut taken, config.dimension).ok_or_else(|| {
                Error::Config(format!(
                    "no free embedding bucket left for a keyword; raise the dimension above {}",
                    config.dimension
                ))
            })?;
            let mut filler = |n: usize| -> Vec<&str> { (0..n).map(|_| *FILLER.choose(&mut rng).unwrap()).collect() };
            let mut words = vec![keyword.as_str()];
            words.extend(filler(config.filler_words));
            let ocr_blocks = vec![
                OcrBlock {
                    text: words.join(" "),
                    layout_order: 0,
                },
                OcrBlock {
                    text: filler(config.filler_words.max(1)).join(" "),
                    layout_order: 2 + config.components_per_page as i64,
                },
            ];
            let components = (0..config.components_per_page)
                .map(|c| Component {
                    id: format!("c{c}"),
                    kind: kind_of(c),
                    image_ref: component_ref(d, p, c),
                    layout_order: 1 + c as i64,
                    caption: Some(format!("{} of {}", kind_of(c), filler(3).join(" "))),
                })
                .collect();
            passages.push(Passage {
                id: id.clone(),
                page_image_ref: page_ref(d, p),
                components,
                ocr_blocks,
                text_surrogate: None,
            });
            queries.push(EvalQuery {
                query_id: format!("q{:04}", queries.len()),
                query_text: keyword.clone(),
                gold_passage_ids: BTreeSet::from([id.clone()]),
            });
            keywords.insert(id, keyword);
        }
        documents.push(Document {
            id: format!("d{d:03}"),
            passages,
        });
    }

    let mut corpus = Corpus::empty(MANIFEST_FILE);
    corpus.documents = documents;
    Ok(SyntheticCorpus {
        corpus,
        queries,
        keywords,
    })
}

/// Writes `manifest.jsonl` and `queries.jsonl` into `dir`.
pub fn write_synthetic(synthetic: &SyntheticCorpus, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = dir.join(MANIFEST_FILE);
    let queries = dir.join(QUERIES_FILE);
    write_manifest(&synthetic.corpus, &manifest)?;
    write_eval_set(&synthetic.queries, &queries)?;
    Ok((manifest, queries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::load_corpus;
    use crate::eval::load_eval_set;

    #[test]
    fn seeded_and_reproducible() {
        let cfg = SynthConfig::default();
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.keywords, b.keywords);
        let c = generate_synthetic(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.keywords, c.keywords);
    }

    #[test]
    fn keyword_buckets_are_private() {
        let cfg = SynthConfig::default();
        let s = generate_synthetic(&cfg).unwrap();
        let mut other = reserved_buckets(&cfg);
        let mut seen = HashSet::new();
        for p in s.corpus.passages() {
            let kw = &s.keywords[&p.id];
            let b = token_bucket(kw, cfg.dimension);
            assert!(seen.insert(b));
            assert!(!other.contains(&b));
            for tok in p.surrogate().split_whitespace().filter(|t| t != kw) {
                other.insert(token_bucket(tok, cfg.dimension));
            }
        }
        for kw in s.keywords.values() {
            assert!(!other.contains(&token_bucket(kw, cfg.dimension)));
        }
    }

    #[test]
    fn round_trips_through_disk() {
        let s = generate_synthetic(&SynthConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (m, q) = write_synthetic(&s, dir.path()).unwrap();
        let corpus = load_corpus(&m).unwrap();
        assert_eq!(corpus, s.corpus);
        assert!(corpus.dangling_refs.is_empty());
        assert_eq!(load_eval_set(&q, Some(&corpus)).unwrap(), s.queries);
    }

    #[test]
    fn too_small_a_dimension_is_reported() {
        let cfg = SynthConfig {
            documents: 50,
            dimension: 64,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }
}
