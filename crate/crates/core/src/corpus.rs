//! Corpus data model and manifest ingestion.
//!
//! A corpus arrives already parsed: one manifest line per page, carrying the
//! page image reference, its OCR blocks and its detected multimodal
//! components. Pages are grouped into documents by `document_id` in order of
//! first appearance and sorted by `page_index`.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentKind {
    Table,
    Figure,
    Chart,
    Diagram,
    Other,
}

impl ComponentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ComponentKind::Table => "table",
            ComponentKind::Figure => "figure",
            ComponentKind::Chart => "chart",
            ComponentKind::Diagram => "diagram",
            ComponentKind::Other => "other",
        }
    }
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A detected table, figure, chart or diagram on a page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub id: String,
    pub kind: ComponentKind,
    pub image_ref: String,
    pub layout_order: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrBlock {
    pub text: String,
    pub layout_order: i64,
}

/// One page of a document.
#[derive(Debug, Clone, PartialEq)]
pub struct Passage {
    pub id: String,
    pub page_image_ref: String,
    pub components: Vec<Component>,
    pub ocr_blocks: Vec<OcrBlock>,
    pub text_surrogate: Option<String>,
}

impl Passage {
    /// The stored surrogate, or one assembled from OCR blocks and captions.
    pub fn surrogate(&self) -> String {
        match &self.text_surrogate {
            Some(text) => text.clone(),
            None => assemble_text_surrogate(self),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub passages: Vec<Passage>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub manifest_path: PathBuf,
    /// Directory that relative image references resolve against.
    pub base_dir: PathBuf,
    /// Image references that did not resolve to an existing file at load time.
    pub dangling_refs: Vec<String>,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.documents == other.documents
    }
}

impl Corpus {
    pub fn empty(manifest_path: impl Into<PathBuf>) -> Self {
        let manifest_path = manifest_path.into();
        let base_dir = manifest_dir(&manifest_path);
        Corpus {
            documents: Vec::new(),
            manifest_path,
            base_dir,
            dangling_refs: Vec::new(),
        }
    }

    pub fn passages(&self) -> impl Iterator<Item = &Passage> {
        self.documents.iter().flat_map(|d| d.passages.iter())
    }

    pub fn passages_mut(&mut self) -> impl Iterator<Item = &mut Passage> {
        self.documents.iter_mut().flat_map(|d| d.passages.iter_mut())
    }

    pub fn num_passages(&self) -> usize {
        self.documents.iter().map(|d| d.passages.len()).sum()
    }

    pub fn passage(&self, id: &str) -> Option<&Passage> {
        self.passages().find(|p| p.id == id)
    }

    /// Maps each passage id to the id of its owning document.
    pub fn document_of(&self) -> HashMap<String, String> {
        self.documents
            .iter()
            .flat_map(|d| d.passages.iter().map(move |p| (p.id.clone(), d.id.clone())))
            .collect()
    }

    /// Resolves an image reference: URIs pass through, relative paths are
    /// joined onto `base_dir`.
    pub fn resolve_ref(&self, raw: &str) -> String {
        if is_uri(raw) || Path::new(raw).is_absolute() {
            raw.to_string()
        } else {
            self.base_dir.join(raw).to_string_lossy().into_owned()
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Fail on image references that do not resolve to an existing file.
    pub strict: bool,
    /// Resolve relative references against this directory instead of the
    /// manifest's own directory.
    pub base_dir: Option<PathBuf>,
}

/// One manifest line.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    passage_id: Option<String>,
    document_id: String,
    page_index: usize,
    page_image_ref: String,
    #[serde(default)]
    ocr_blocks: Vec<OcrBlock>,
    #[serde(default)]
    components: Vec<Component>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_surrogate: Option<String>,
}

pub fn load_corpus(manifest_path: impl AsRef<Path>) -> Result<Corpus> {
    load_corpus_with(manifest_path, &LoadOptions::default())
}

pub fn load_corpus_with(manifest_path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Corpus> {
    let path = manifest_path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Record {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        records.push(rec);
    }

    let base_dir = opts.base_dir.clone().unwrap_or_else(|| manifest_dir(path));
    let mut corpus = Corpus {
        documents: assemble_documents(records)?,
        manifest_path: path.to_path_buf(),
        base_dir,
        dangling_refs: Vec::new(),
    };
    validate(&corpus)?;

    corpus.dangling_refs = find_dangling(&corpus);
    if !corpus.dangling_refs.is_empty() {
        if opts.strict {
            return Err(Error::DanglingImageRefs(corpus.dangling_refs));
        }
        tracing::warn!(
            count = corpus.dangling_refs.len(),
            first = %corpus.dangling_refs[0],
            "image references do not resolve to files"
        );
    }
    Ok(corpus)
}

/// Writes the corpus as a manifest, one record per passage in corpus order.
pub fn write_manifest(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for doc in &corpus.documents {
        for (j, p) in doc.passages.iter().enumerate() {
            let rec = ManifestRecord {
                passage_id: Some(p.id.clone()),
                document_id: doc.id.clone(),
                page_index: j,
                page_image_ref: p.page_image_ref.clone(),
                ocr_blocks: p.ocr_blocks.clone(),
                components: p.components.clone(),
                text_surrogate: p.text_surrogate.clone(),
            };
            let line = serde_json::to_string(&rec).expect("manifest record serializes");
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

fn assemble_documents(records: Vec<ManifestRecord>) -> Result<Vec<Document>> {
    let mut order: Vec<String> = Vec::new();
    let mut pages: HashMap<String, Vec<(usize, Passage)>> = HashMap::new();
    for rec in records {
        let id = rec
            .passage_id
            .unwrap_or_else(|| format!("{}/p{}", rec.document_id, rec.page_index));
        let passage = Passage {
            id,
            page_image_ref: rec.page_image_ref,
            components: rec.components,
            ocr_blocks: rec.ocr_blocks,
            text_surrogate: rec.text_surrogate,
        };
        let entry = pages.entry(rec.document_id.clone()).or_insert_with(|| {
            order.push(rec.document_id.clone());
            Vec::new()
        });
        entry.push((rec.page_index, passage));
    }

    let mut documents = Vec::with_capacity(order.len());
    for doc_id in order {
        let mut doc_pages = pages.remove(&doc_id).unwrap_or_default();
        doc_pages.sort_by_key(|(j, _)| *j);
        for (expected, (j, p)) in doc_pages.iter().enumerate() {
            if *j != expected {
                return Err(Error::InvalidCorpus(format!(
                    "document `{doc_id}`: page indices must be contiguous from 0, \
                     found {j} at position {expected} (passage `{}`)",
                    p.id
                )));
            }
        }
        documents.push(Document {
            id: doc_id,
            passages: doc_pages.into_iter().map(|(_, p)| p).collect(),
        });
    }
    Ok(documents)
}

fn validate(corpus: &Corpus) -> Result<()> {
    let mut seen = HashSet::new();
    for p in corpus.passages() {
        if p.id.is_empty() || p.id.contains(['\n', '\r']) {
            return Err(Error::InvalidCorpus(format!("bad passage id {:?}", p.id)));
        }
        if !seen.insert(p.id.as_str()) {
            return Err(Error::DuplicatePassageId(p.id.clone()));
        }

        let mut orders = HashSet::new();
        let all_orders = p
            .ocr_blocks
            .iter()
            .map(|b| b.layout_order)
            .chain(p.components.iter().map(|c| c.layout_order));
        for order in all_orders {
            if !orders.insert(order) {
                return Err(Error::InvalidCorpus(format!(
                    "passage `{}`: layout_order {order} used twice",
                    p.id
                )));
            }
        }

        let mut component_ids = HashSet::new();
        for c in &p.components {
            if c.id.is_empty() || c.id.contains([':', '\n', '\r']) {
                return Err(Error::InvalidCorpus(format!(
                    "passage `{}`: bad component id {:?}",
                    p.id, c.id
                )));
            }
            if !component_ids.insert(c.id.as_str()) {
                return Err(Error::InvalidCorpus(format!(
                    "passage `{}`: duplicate component id `{}`",
                    p.id, c.id
                )));
            }
        }

        let has_content = !p.ocr_blocks.is_empty() || p.components.iter().any(|c| c.caption.is_some());
        if has_content && p.text_surrogate.as_deref() == Some("") {
            return Err(Error::InvalidCorpus(format!(
                "passage `{}`: empty text_surrogate for a page with content",
                p.id
            )));
        }
    }
    Ok(())
}

fn find_dangling(corpus: &Corpus) -> Vec<String> {
    let refs = corpus.passages().flat_map(|p| {
        std::iter::once(p.page_image_ref.as_str()).chain(p.components.iter().map(|c| c.image_ref.as_str()))
    });
    refs.filter(|r| !is_uri(r) && !Path::new(&corpus.resolve_ref(r)).exists())
        .map(str::to_string)
        .collect()
}

pub(crate) fn is_uri(raw: &str) -> bool {
    raw.starts_with("data:") || raw.contains("://")
}

fn manifest_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Merges OCR blocks and component captions into one layout-ordered text.
///
/// Blocks are stably sorted by `layout_order` (OCR blocks before components
/// on equal keys) and joined with a blank line; captions carry a `[kind] `
/// prefix. Components without a caption are skipped.
pub fn assemble_text_surrogate(passage: &Passage) -> String {
    let mut blocks: Vec<(i64, String)> = passage
        .ocr_blocks
        .iter()
        .map(|b| (b.layout_order, b.text.clone()))
        .collect();
    for c in &passage.components {
        match &c.caption {
            Some(caption) => blocks.push((c.layout_order, format!("[{}] {}", c.kind, caption))),
            None => tracing::warn!(passage = %passage.id, component = %c.id, "uncaptioned component skipped"),
        }
    }
    blocks.sort_by_key(|(order, _)| *order);
    blocks
        .into_iter()
        .map(|(_, text)| text)
        .collect::<Vec<_>>()
        .join("\n\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write(dir: &Path, lines: &[&str]) -> PathBuf {
        let path = dir.join("manifest.jsonl");
        std::fs::write(&path, lines.join("\n")).unwrap();
        path
    }

    fn passage(ocr: &[(&str, i64)], comps: &[(&str, Option<&str>, i64)]) -> Passage {
        Passage {
            id: "d0/p0".into(),
            page_image_ref: "p0.png".into(),
            ocr_blocks: ocr
                .iter()
                .map(|(t, o)| OcrBlock {
                    text: t.to_string(),
                    layout_order: *o,
                })
                .collect(),
            components: comps
                .iter()
                .map(|(id, cap, o)| Component {
                    id: id.to_string(),
                    kind: ComponentKind::Figure,
                    image_ref: format!("{id}.png"),
                    layout_order: *o,
                    caption: cap.map(str::to_string),
                })
                .collect(),
            text_surrogate: None,
        }
    }

    #[test]
    fn loads_minimal_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            &[
                r#"{"document_id":"d0","page_index":1,"page_image_ref":"p1.png"}"#,
                r#"{"document_id":"d0","page_index":0,"page_image_ref":"p0.png","ocr_blocks":[{"text":"hi","layout_order":0}]}"#,
            ],
        );
        let corpus = load_corpus(&path).unwrap();
        let ids: Vec<_> = corpus.passages().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, ["d0/p0", "d0/p1"]);
        assert_eq!(corpus.documents.len(), 1);
        // neither image exists on disk
        assert_eq!(corpus.dangling_refs.len(), 2);
    }

    #[test]
    fn duplicate_passage_id_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            &[
                r#"{"passage_id":"x","document_id":"d0","page_index":0,"page_image_ref":"a"}"#,
                r#"{"passage_id":"x","document_id":"d1","page_index":0,"page_image_ref":"b"}"#,
            ],
        );
        assert!(matches!(load_corpus(&path), Err(Error::DuplicatePassageId(id)) if id == "x"));
    }

    #[test]
    fn empty_manifest_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(dir.path(), &[]);
        let corpus = load_corpus(&path).unwrap();
        assert_eq!(corpus.num_passages(), 0);
    }

    #[test]
    fn missing_manifest_is_io_error() {
        assert!(matches!(
            load_corpus("/nonexistent/manifest.jsonl"),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn gap_in_page_indices_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            &[r#"{"document_id":"d0","page_index":1,"page_image_ref":"a"}"#],
        );
        assert!(matches!(load_corpus(&path), Err(Error::InvalidCorpus(_))));
    }

    #[test]
    fn strict_mode_fails_on_dangling_refs_but_not_on_uris() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("ok.png"), b"").unwrap();
        let path = write(
            dir.path(),
            &[
                r#"{"document_id":"d0","page_index":0,"page_image_ref":"ok.png"}"#,
                r#"{"document_id":"d0","page_index":1,"page_image_ref":"https://example.org/p1.png"}"#,
            ],
        );
        let strict = LoadOptions {
            strict: true,
            ..Default::default()
        };
        assert!(load_corpus_with(&path, &strict).is_ok());

        let path = write(
            dir.path(),
            &[r#"{"document_id":"d0","page_index":0,"page_image_ref":"missing.png"}"#],
        );
        assert!(matches!(
            load_corpus_with(&path, &strict),
            Err(Error::DanglingImageRefs(refs)) if refs == ["missing.png"]
        ));
    }

    #[test]
    fn duplicate_layout_order_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            &[
                r#"{"document_id":"d0","page_index":0,"page_image_ref":"a","ocr_blocks":[{"text":"x","layout_order":1}],"components":[{"id":"c","kind":"table","image_ref":"c.png","layout_order":1}]}"#,
            ],
        );
        assert!(matches!(load_corpus(&path), Err(Error::InvalidCorpus(_))));
    }

    #[test]
    fn surrogate_interleaves_captions_in_layout_order() {
        let p = passage(&[("A", 0), ("C", 2)], &[("c0", Some("B"), 1)]);
        assert_eq!(assemble_text_surrogate(&p), "A\n\n[figure] B\n\nC");
    }

    #[test]
    fn surrogate_without_components_joins_ocr() {
        let p = passage(&[("second", 5), ("first", -1)], &[]);
        assert_eq!(assemble_text_surrogate(&p), "first\n\nsecond");
    }

    #[test]
    fn surrogate_of_captions_only() {
        let p = passage(&[], &[("b", Some("two"), 9), ("a", Some("one"), 3)]);
        assert_eq!(assemble_text_surrogate(&p), "[figure] one\n\n[figure] two");
    }

    #[test]
    fn surrogate_skips_uncaptioned_and_handles_empty() {
        let p = passage(&[("x", 0)], &[("c0", None, 1)]);
        assert_eq!(assemble_text_surrogate(&p), "x");
        assert_eq!(assemble_text_surrogate(&passage(&[], &[])), "");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            &[
                r#"{"document_id":"a","page_index":0,"page_image_ref":"a0.png","ocr_blocks":[{"text":"t","layout_order":0}],"components":[{"id":"c","kind":"chart","image_ref":"c.png","layout_order":1,"caption":"cap"}],"text_surrogate":"t\n\n[chart] cap"}"#,
                r#"{"document_id":"b","page_index":0,"page_image_ref":"b0.png"}"#,
            ],
        );
        let first = load_corpus(&path).unwrap();
        let copy = dir.path().join("copy.jsonl");
        write_manifest(&first, &copy).unwrap();
        let second = load_corpus(&copy).unwrap();
        assert_eq!(first, second);
    }

    proptest! {
        #[test]
        fn surrogate_contains_every_block_once_in_order(
            orders in proptest::sample::subsequence((0i64..40).collect::<Vec<_>>(), 0..12)
                .prop_shuffle(),
            split in 0usize..12,
        ) {
            let split = split.min(orders.len());
            let texts: Vec<String> = orders.iter().map(|o| format!("block{o}")).collect();
            let ocr: Vec<(&str, i64)> = texts[..split].iter().map(String::as_str).zip(orders[..split].iter().copied()).collect();
            let comps: Vec<(&str, Option<&str>, i64)> = texts[split..]
                .iter()
                .map(|t| (t.as_str(), Some(t.as_str()), 0))
                .zip(orders[split..].iter())
                .map(|((id, cap, _), o)| (id, cap, *o))
                .collect();
            let p = passage(&ocr, &comps);
            let out = assemble_text_surrogate(&p);
            prop_assert_eq!(&out, &assemble_text_surrogate(&p.clone()));

            let mut sorted = orders.clone();
            sorted.sort();
            let expected: Vec<String> = sorted
                .iter()
                .map(|o| {
                    let pos = orders.iter().position(|x| x == o).unwrap();
                    if pos < split { format!("block{o}") } else { format!("[figure] block{o}") }
                })
                .collect();
            prop_assert_eq!(out, expected.join("\n\n"));
        }
    }
}
