//! Prompt templates for captioning, question generation and group ranking.
//!
//! Templates use `{name}` placeholder slots and `{{` / `}}` for literal
//! braces. A `{...}` that does not name a supplied slot is left untouched.

use std::path::Path;

use crate::error::{Error, Result};

pub const CAPTION: &str = include_str!("../../prompts/caption.txt");
pub const TEXTUAL_PREQ: &str = include_str!("../../prompts/textual_preq.txt");
pub const VISUAL_PREQ: &str = include_str!("../../prompts/visual_preq.txt");
pub const QCLUSTER_RANK: &str = include_str!("../../prompts/qcluster_rank.txt");

pub const SLOT_MAX_QUESTIONS: &str = "cfg.max_new_questions";
pub const SLOT_DOCUMENT_TEXT: &str = "document_text";
pub const SLOT_QUERY: &str = "query";
pub const SLOT_QUESTIONS_TEXT: &str = "questions_text";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub caption: String,
    pub textual: String,
    pub visual: String,
    pub rank: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            caption: trim_final_newline(CAPTION).to_string(),
            textual: trim_final_newline(TEXTUAL_PREQ).to_string(),
            visual: trim_final_newline(VISUAL_PREQ).to_string(),
            rank: trim_final_newline(QCLUSTER_RANK).to_string(),
        }
    }
}

impl PromptTemplates {
    /// Built-in templates, with any of `caption.txt`, `textual_preq.txt`,
    /// `visual_preq.txt` or `qcluster_rank.txt` found in `dir` taking precedence.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut t = PromptTemplates::default();
        for (name, slot) in [
            ("caption.txt", &mut t.caption),
            ("textual_preq.txt", &mut t.textual),
            ("visual_preq.txt", &mut t.visual),
            ("qcluster_rank.txt", &mut t.rank),
        ] {
            let path = dir.join(name);
            if path.exists() {
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                *slot = trim_final_newline(&text).to_string();
            }
        }
        Ok(t)
    }
}

fn trim_final_newline(s: &str) -> &str {
    s.strip_suffix('\n').unwrap_or(s)
}

/// Fills placeholder slots in `template`.
pub fn render(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix("{{") {
            out.push('{');
            rest = after;
        } else if let Some(after) = tail.strip_prefix("}}") {
            out.push('}');
            rest = after;
        } else if let Some(inner) = tail.strip_prefix('{') {
            let filled = inner.find('}').and_then(|end| {
                let name = &inner[..end];
                slots
                    .iter()
                    .find(|(slot, _)| *slot == name)
                    .map(|(_, value)| (*value, end + 2))
            });
            match filled {
                Some((value, consumed)) => {
                    out.push_str(value);
                    rest = &tail[consumed..];
                }
                None => {
                    out.push('{');
                    rest = &tail[1..];
                }
            }
        } else {
            out.push('}');
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_fills_slots_and_unescapes_braces() {
        let out = render("a {x} {{b}} {y} {unknown} }", &[("x", "1"), ("y", "{x}")]);
        assert_eq!(out, "a 1 {b} {x} {unknown} }");
    }

    #[test]
    fn render_leaves_bare_braces_alone() {
        let out = render("[\n  {\n    \"q\": 1\n  }\n]", &[]);
        assert_eq!(out, "[\n  {\n    \"q\": 1\n  }\n]");
    }

    #[test]
    fn templates_carry_their_slots() {
        let t = PromptTemplates::default();
        assert!(t.textual.contains("{cfg.max_new_questions}"));
        assert!(t.textual.contains("{document_text}"));
        assert!(t.visual.contains("{cfg.max_new_questions}"));
        assert!(t.rank.contains("{query}") && t.rank.contains("{questions_text}"));
        assert!(!t.caption.contains('{'));
    }

    #[test]
    fn directory_overrides_individual_templates() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("caption.txt"), "custom\n").unwrap();
        let t = PromptTemplates::from_dir(dir.path()).unwrap();
        assert_eq!(t.caption, "custom");
        assert_eq!(t.rank, PromptTemplates::default().rank);
    }
}
