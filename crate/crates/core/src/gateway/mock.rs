//! Deterministic offline backend.
//!
//! Every answer is a pure function of the request:
//! - captions are `caption({kind}:{image_ref})`;
//! - textual questions restate fragments (lines and sentences) of the
//!   document text, cycling through them, each tagged `[ordinal]`;
//! - image questions name the page or component reference;
//! - rankings follow [`RankerBehavior`];
//! - embeddings are bags of hashed lowercase whitespace tokens.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ChatRequest, GatewayError, ModelBackend, PromptKind, QuestionPayload, Task};

pub const DEFAULT_MOCK_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankerBehavior {
    /// `1,2,...` up to five groups: keeps retrieval order.
    #[default]
    Identity,
    /// Highest group numbers first.
    Reverse,
    /// Always answers with this raw text.
    Fixed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    /// Questions emitted per generation prompt, regardless of the requested cap.
    pub questions_per_prompt: usize,
    pub ranker: RankerBehavior,
    /// Visual prompts answer `[]`.
    pub visual_returns_empty: bool,
    /// Raw output returned verbatim for a question kind.
    pub overrides: BTreeMap<PromptKind, String>,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            questions_per_prompt: 3,
            ranker: RankerBehavior::Identity,
            visual_returns_empty: false,
            overrides: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    config: MockConfig,
    dim: usize,
}

impl MockBackend {
    pub fn new(config: MockConfig, dim: usize) -> Self {
        MockBackend { config, dim }
    }

    fn questions(&self, kind: PromptKind, payload: QuestionPayload<'_>) -> String {
        if let Some(raw) = self.config.overrides.get(&kind) {
            return raw.clone();
        }
        if kind == PromptKind::Visual && self.config.visual_returns_empty {
            return "[]".into();
        }
        let n = self.config.questions_per_prompt;
        let questions: Vec<String> = match payload {
            QuestionPayload::Text(text) => {
                let fragments = text_fragments(text);
                if fragments.is_empty() {
                    Vec::new()
                } else {
                    (0..n)
                        .map(|i| format!("{} [{}]", fragments[i % fragments.len()], i + 1))
                        .collect()
                }
            }
            QuestionPayload::Image(image) => {
                let prefix = if kind == PromptKind::Multimodal {
                    "page"
                } else {
                    "component"
                };
                (0..n).map(|i| format!("{prefix} {} [{}]", image.raw, i + 1)).collect()
            }
        };
        let objects: Vec<_> = questions
            .into_iter()
            .map(|q| serde_json::json!({ "question": q }))
            .collect();
        serde_json::to_string(&objects).expect("question list serializes")
    }

    fn ranking(&self, group_count: usize) -> String {
        let top = group_count.min(super::parse::MAX_RANKED_GROUPS);
        let numbers: Vec<String> = match &self.config.ranker {
            RankerBehavior::Identity => (1..=top).map(|n| n.to_string()).collect(),
            RankerBehavior::Reverse => (1..=group_count).rev().take(top).map(|n| n.to_string()).collect(),
            RankerBehavior::Fixed(raw) => return raw.clone(),
        };
        numbers.join(",")
    }
}

impl ModelBackend for MockBackend {
    fn complete(&self, req: &ChatRequest<'_>) -> Result<String, GatewayError> {
        Ok(match req.task {
            Task::Caption { kind, image } => format!("caption({kind}:{})", image.raw),
            Task::Questions { kind, payload, .. } => self.questions(kind, payload),
            Task::RankGroups { group_count } => self.ranking(group_count),
        })
    }

    fn embed(&self, _model: &str, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        texts.iter().map(|t| hashed_bag(t, self.dim)).collect()
    }
}

/// Non-empty lines and sentences of `text`, trailing punctuation removed.
pub fn text_fragments(text: &str) -> Vec<String> {
    text.lines()
        .flat_map(|line| line.split(". "))
        .map(|s| s.trim().trim_end_matches(['.', '!', '?']).trim())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Bucket of a token in a `dim`-bucket hashed bag.
pub fn token_bucket(token: &str, dim: usize) -> usize {
    (fnv1a(token.as_bytes()) % dim as u64) as usize
}

/// Token counts over `dim` hash buckets (not normalized).
pub fn hashed_bag(text: &str, dim: usize) -> Result<Vec<f32>, GatewayError> {
    let lower = text.to_lowercase();
    let mut counts = vec![0f32; dim];
    let mut any = false;
    for tok in lower.split_whitespace() {
        counts[token_bucket(tok, dim)] += 1.0;
        any = true;
    }
    if any {
        Ok(counts)
    } else {
        Err(GatewayError::EmptyText)
    }
}

// 64-bit FNV-1a; stable across platforms and toolchains.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::parse::parse_questions;
    use crate::gateway::ImageInput;

    #[test]
    fn fnv_matches_reference_vectors() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn textual_questions_cycle_fragments() {
        let m = MockBackend::new(MockConfig::default(), 16);
        let raw = m.questions(
            PromptKind::Textual,
            QuestionPayload::Text("alpha beta. gamma\n\n[figure] delta"),
        );
        let qs = parse_questions(&raw).unwrap();
        assert_eq!(qs, ["alpha beta [1]", "gamma [2]", "[figure] delta [3]"]);
    }

    #[test]
    fn empty_text_yields_no_questions() {
        let m = MockBackend::new(MockConfig::default(), 16);
        assert_eq!(m.questions(PromptKind::Textual, QuestionPayload::Text("  \n")), "[]");
    }

    #[test]
    fn visual_can_answer_empty() {
        let m = MockBackend::new(
            MockConfig {
                visual_returns_empty: true,
                ..MockConfig::default()
            },
            16,
        );
        let img = ImageInput::unresolved("c.png");
        assert_eq!(m.questions(PromptKind::Visual, QuestionPayload::Image(&img)), "[]");
        assert_ne!(m.questions(PromptKind::Multimodal, QuestionPayload::Image(&img)), "[]");
    }

    #[test]
    fn rankers() {
        let m = |r| {
            MockBackend::new(
                MockConfig {
                    ranker: r,
                    ..MockConfig::default()
                },
                4,
            )
        };
        assert_eq!(m(RankerBehavior::Identity).ranking(7), "1,2,3,4,5");
        assert_eq!(m(RankerBehavior::Identity).ranking(2), "1,2");
        assert_eq!(m(RankerBehavior::Reverse).ranking(7), "7,6,5,4,3");
        assert_eq!(m(RankerBehavior::Fixed("zz".into())).ranking(7), "zz");
    }

    #[test]
    fn hashed_bag_counts_lowercased_tokens() {
        let bag = hashed_bag("Apple apple PIE", 64).unwrap();
        assert_eq!(
            bag[token_bucket("apple", 64)],
            2.0 + if token_bucket("pie", 64) == token_bucket("apple", 64) {
                1.0
            } else {
                0.0
            }
        );
        assert_eq!(bag.iter().sum::<f32>(), 3.0);
        assert!(hashed_bag(" \t", 8).is_err());
    }
}
