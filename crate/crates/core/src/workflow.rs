//! Run configuration and the file-backed pipeline stages.
//!
//! Every stage reads its inputs from and writes its outputs to the run's
//! working directory, so stages can be run one at a time:
//!
//! | stage    | writes                                             |
//! |----------|----------------------------------------------------|
//! | caption  | `corpus.jsonl`, `caption_report.json`              |
//! | generate | `preqs.jsonl`, `preq_embeddings.bin`, `generate_report.json` |
//! | index    | `index/vectors.bin`, `index/ids.txt`               |
//! | eval     | `eval_report.json`, `eval_table.txt`, `query_results.jsonl` |
//! | analyze  | `redundancy.json`, `coverage.json`, `embeddings.tsv` |
//!
//! Each stage also writes `config_fingerprint.txt`. Outputs carry no
//! timestamps; the same inputs give byte-identical files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{load_corpus_with, write_manifest, Corpus, LoadOptions};
use crate::error::{Error, Result};
use crate::eval::{self, coverage, redundancy, EvalQuery, EvalReport};
use crate::gateway::{ImageInput, ModelGateway, ProviderConfig};
use crate::index::VectorIndex;
use crate::preq::{self, GenConfig, ModalitySet, RetrievalPool, RunReport};
use crate::qcluster::{Engine, QueryOutcome, QueryRequest, DEFAULT_GROUP_CAP, MAX_LLM_PASSAGES};

pub const FINGERPRINT_FILE: &str = "config_fingerprint.txt";
pub const CAPTIONED_CORPUS_FILE: &str = "corpus.jsonl";
pub const CAPTION_REPORT_FILE: &str = "caption_report.json";
pub const GENERATE_REPORT_FILE: &str = "generate_report.json";
pub const INDEX_DIR: &str = "index";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const EVAL_TABLE_FILE: &str = "eval_table.txt";
pub const QUERY_RESULTS_FILE: &str = "query_results.jsonl";
pub const REDUNDANCY_FILE: &str = "redundancy.json";
pub const COVERAGE_FILE: &str = "coverage.json";
pub const EMBEDDINGS_EXPORT_FILE: &str = "embeddings.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub use_qcluster: bool,
    pub top_passages: usize,
    pub group_cap: usize,
    pub k_override: Option<usize>,
    pub modalities: ModalitySet,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            use_qcluster: true,
            top_passages: MAX_LLM_PASSAGES,
            group_cap: DEFAULT_GROUP_CAP,
            k_override: None,
            modalities: ModalitySet::ALL,
        }
    }
}

impl RetrievalConfig {
    pub fn request(&self, query_text: impl Into<String>) -> QueryRequest {
        QueryRequest {
            query_text: query_text.into(),
            top_passages: self.top_passages,
            use_qcluster: self.use_qcluster,
            modality_mask: self.modalities,
            group_cap: self.group_cap,
            k_override: self.k_override,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub thresholds: Vec<f64>,
    pub eps: f64,
    pub min_pts: usize,
    pub n_values: Vec<usize>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            thresholds: redundancy::DEFAULT_THRESHOLDS.to_vec(),
            eps: eval::dbscan::DEFAULT_EPS,
            min_pts: eval::dbscan::DEFAULT_MIN_PTS,
            n_values: coverage::DEFAULT_N_VALUES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus_manifest: PathBuf,
    #[serde(default = "default_workdir")]
    pub workdir: PathBuf,
    #[serde(default)]
    pub eval_set: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; unset uses one per core.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Fail when an image reference does not resolve to a file.
    #[serde(default)]
    pub strict_images: bool,
    #[serde(default)]
    pub provider: ProviderConfig,
    #[serde(default, alias = "gen")]
    pub generation: GenConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

fn default_workdir() -> PathBuf {
    PathBuf::from("work")
}

impl RunConfig {
    pub fn new(corpus_manifest: impl Into<PathBuf>, workdir: impl Into<PathBuf>) -> Self {
        RunConfig {
            corpus_manifest: corpus_manifest.into(),
            workdir: workdir.into(),
            eval_set: None,
            seed: 0,
            workers: None,
            strict_images: false,
            provider: ProviderConfig::default(),
            generation: GenConfig::default(),
            retrieval: RetrievalConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }

    /// Reads a TOML config; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.corpus_manifest);
        rebase(&mut cfg.workdir);
        if let Some(p) = cfg.eval_set.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.provider.prompt_dir.as_mut() {
            rebase(p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.provider.validate()?;
        self.generation.validate()?;
        self.retrieval.request("x").validate()?;
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.analysis.n_values.contains(&0) {
            return Err(Error::Config("analysis n values must be at least 1".into()));
        }
        Ok(())
    }

    /// Hash of every setting that can change an artifact. The working
    /// directory, worker count and file locations are left out.
    pub fn fingerprint(&self) -> String {
        #[derive(Serialize)]
        struct Settings<'a> {
            seed: u64,
            strict_images: bool,
            provider: &'a ProviderConfig,
            generation: &'a GenConfig,
            retrieval: &'a RetrievalConfig,
            analysis: &'a AnalysisConfig,
        }
        let mut provider = self.provider.clone();
        provider.prompt_dir = None;
        eval::fingerprint(&Settings {
            seed: self.seed,
            strict_images: self.strict_images,
            provider: &provider,
            generation: &self.generation,
            retrieval: &self.retrieval,
            analysis: &self.analysis,
        })
    }

    pub fn gateway(&self) -> Result<ModelGateway> {
        Ok(ModelGateway::from_config(self.provider.clone())?)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }

    /// Creates the working directory and records the config fingerprint.
    fn ensure_workdir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.workdir).map_err(|e| Error::io(&self.workdir, e))?;
        write_text(&format!("{}\n", self.fingerprint()), &self.path(FINGERPRINT_FILE))
    }

    fn load_options(&self) -> LoadOptions {
        LoadOptions {
            strict: self.strict_images,
            base_dir: None,
        }
    }

    /// The source corpus named in the config.
    pub fn source_corpus(&self) -> Result<Corpus> {
        load_corpus_with(&self.corpus_manifest, &self.load_options())
    }

    /// The captioned corpus when present, else the source corpus. Image
    /// references in either resolve against the source manifest's directory.
    pub fn corpus(&self) -> Result<Corpus> {
        let captioned = self.path(CAPTIONED_CORPUS_FILE);
        if !captioned.exists() {
            return self.source_corpus();
        }
        let source = self.source_corpus()?;
        let mut corpus = load_corpus_with(
            &captioned,
            &LoadOptions {
                base_dir: Some(source.base_dir.clone()),
                ..self.load_options()
            },
        )?;
        corpus.manifest_path = source.manifest_path;
        Ok(corpus)
    }

    pub fn eval_queries(&self, corpus: &Corpus) -> Result<Vec<EvalQuery>> {
        let path = self
            .eval_set
            .as_ref()
            .ok_or_else(|| Error::Config("no eval_set configured".into()))?;
        eval::load_eval_set(path, Some(corpus))
    }

    pub fn pool(&self) -> Result<RetrievalPool> {
        preq::read_store(&self.workdir)
    }

    /// The stored pool and index, checked against each other.
    pub fn engine<'g>(&self, gateway: &'g ModelGateway) -> Result<Engine<'g>> {
        let pool = self.pool()?;
        let index = VectorIndex::load(&self.path(INDEX_DIR))?;
        let stale = index.len() != pool.len() || index.ids().iter().any(|id| pool.get(id).is_none());
        if stale {
            return Err(Error::CorruptIndex {
                path: self.path(INDEX_DIR),
                message: "index does not match the preQ store; rerun index".into(),
            });
        }
        Ok(Engine::from_parts(pool, index, gateway))
    }
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(text: &str, path: &Path) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionReport {
    pub captioned: usize,
    pub already_captioned: usize,
    pub failed: Vec<String>,
    pub skipped_stage: bool,
}

/// Fills missing component captions in place; failures leave the caption
/// empty and are listed in the report.
pub fn caption_corpus(corpus: &mut Corpus, gateway: &ModelGateway) -> CaptionReport {
    let mut report = CaptionReport::default();
    let mut jobs = Vec::new();
    for p in corpus.passages() {
        for c in &p.components {
            if c.caption.is_some() {
                report.already_captioned += 1;
            } else {
                jobs.push((
                    p.id.clone(),
                    c.id.clone(),
                    c.kind,
                    ImageInput::new(&c.image_ref, corpus.resolve_ref(&c.image_ref)),
                ));
            }
        }
    }
    let results = crate::par::map(&jobs, |(_, _, kind, image)| gateway.caption_component(image, *kind));
    let mut captions = std::collections::HashMap::new();
    for ((pid, cid, _, _), r) in jobs.into_iter().zip(results) {
        match r {
            Ok(text) => {
                report.captioned += 1;
                captions.insert((pid, cid), text);
            }
            Err(e) => {
                tracing::warn!(passage = %pid, component = %cid, error = %e, "captioning failed");
                report.failed.push(format!("{pid}:{cid}: {e}"));
            }
        }
    }
    for p in corpus.passages_mut() {
        for c in &mut p.components {
            if let Some(text) = captions.remove(&(p.id.clone(), c.id.clone())) {
                c.caption = Some(text);
            }
        }
    }
    report
}

/// Captions the source corpus into the working directory. With
/// `skip_existing`, an existing captioned corpus is left untouched.
pub fn run_caption(cfg: &RunConfig, gateway: &ModelGateway, skip_existing: bool) -> Result<CaptionReport> {
    cfg.ensure_workdir()?;
    let out = cfg.path(CAPTIONED_CORPUS_FILE);
    if skip_existing && out.exists() {
        return Ok(CaptionReport {
            skipped_stage: true,
            ..Default::default()
        });
    }
    let mut corpus = cfg.source_corpus()?;
    let report = caption_corpus(&mut corpus, gateway);
    if report.captioned == 0 && !report.failed.is_empty() {
        return Err(Error::ProviderFailure {
            stage: "captioning",
            first: report.failed[0].clone(),
        });
    }
    write_manifest(&corpus, &out)?;
    write_json(&report, &cfg.path(CAPTION_REPORT_FILE))?;
    Ok(report)
}

/// Generates and embeds every preQ and writes the store.
pub fn run_generate(cfg: &RunConfig, gateway: &ModelGateway) -> Result<RunReport> {
    cfg.ensure_workdir()?;
    let corpus = cfg.corpus()?;
    let (pool, report) = preq::build_pool(&corpus, &cfg.generation, gateway)?;
    preq::write_store(&pool, &cfg.workdir)?;
    write_json(&report, &cfg.path(GENERATE_REPORT_FILE))?;
    Ok(report)
}

/// Builds the vector index over the stored preQs.
pub fn run_index(cfg: &RunConfig) -> Result<usize> {
    let pool = cfg.pool()?;
    cfg.ensure_workdir()?;
    let index = VectorIndex::build(&pool)?;
    index.persist(&cfg.path(INDEX_DIR))?;
    Ok(index.len())
}

pub fn run_query(cfg: &RunConfig, gateway: &ModelGateway, request: &QueryRequest) -> Result<QueryOutcome> {
    cfg.engine(gateway)?.answer(request)
}

/// Evaluates the configured query set and writes the report files.
pub fn run_eval(cfg: &RunConfig, gateway: &ModelGateway) -> Result<EvalReport> {
    let corpus = cfg.corpus()?;
    cfg.ensure_workdir()?;
    let queries = cfg.eval_queries(&corpus)?;
    let engine = cfg.engine(gateway)?;
    let (mut report, records) = eval::evaluate(&queries, &cfg.retrieval.request(""), &engine)?;
    report.config_fingerprint = cfg.fingerprint();
    write_json(&report, &cfg.path(EVAL_REPORT_FILE))?;
    eval::write_jsonl(&records, &cfg.path(QUERY_RESULTS_FILE))?;
    let label = format!(
        "{}{}",
        cfg.retrieval.modalities,
        if cfg.retrieval.use_qcluster {
            ""
        } else {
            " (no group ranking)"
        }
    );
    write_text(
        &eval::format_metrics_table([(label, &report)]),
        &cfg.path(EVAL_TABLE_FILE),
    )?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Modality,
    Qcluster,
    QuestionCap,
}

impl Ablation {
    fn name(self) -> &'static str {
        match self {
            Ablation::Modality => "modality",
            Ablation::Qcluster => "qcluster",
            Ablation::QuestionCap => "question_cap",
        }
    }
}

/// Runs one ablation and writes `ablation_<name>.json` and `.txt`.
pub fn run_ablation(cfg: &RunConfig, gateway: &ModelGateway, ablation: Ablation) -> Result<Vec<(String, EvalReport)>> {
    let corpus = cfg.corpus()?;
    cfg.ensure_workdir()?;
    let queries = cfg.eval_queries(&corpus)?;
    let template = cfg.retrieval.request("");
    let rows: Vec<(String, EvalReport)> = match ablation {
        Ablation::Modality => {
            let engine = cfg.engine(gateway)?;
            eval::modality_ablation(&queries, &template, &engine)?
                .into_iter()
                .map(|(m, r)| (m.to_string(), r))
                .collect()
        }
        Ablation::Qcluster => {
            let engine = cfg.engine(gateway)?;
            let (with, without) = eval::qcluster_ablation(&queries, &template, &engine)?;
            vec![
                ("with group ranking".into(), with),
                ("without group ranking".into(), without),
            ]
        }
        Ablation::QuestionCap => {
            let pool = cfg.pool()?;
            eval::n_sweep(&queries, &template, &pool, gateway, &cfg.analysis.n_values)?
                .into_iter()
                .map(|(n, r)| (format!("n={n}"), r))
                .collect()
        }
    };
    let stem = format!("ablation_{}", ablation.name());
    let table = eval::format_metrics_table(rows.iter().map(|(l, r)| (l.clone(), r)));
    write_text(&table, &cfg.path(&format!("{stem}.txt")))?;
    let json: Vec<_> = rows
        .iter()
        .map(|(l, r)| serde_json::json!({ "setting": l, "report": r }))
        .collect();
    write_json(&json, &cfg.path(&format!("{stem}.json")))?;
    Ok(rows)
}

pub fn run_redundancy(cfg: &RunConfig) -> Result<redundancy::RedundancyReport> {
    let pool = cfg.pool()?;
    cfg.ensure_workdir()?;
    let corpus = cfg.corpus()?;
    let report = redundancy::redundancy_analysis(&pool, &cfg.analysis.thresholds, Some(&corpus.document_of()))?;
    write_json(&report, &cfg.path(REDUNDANCY_FILE))?;
    Ok(report)
}

pub fn run_coverage(cfg: &RunConfig) -> Result<coverage::CoverageReport> {
    let pool = cfg.pool()?;
    cfg.ensure_workdir()?;
    let corpus = cfg.corpus()?;
    let max_n = cfg.analysis.n_values.iter().copied().max().unwrap_or(0);
    if max_n > cfg.generation.max_questions_per_source {
        tracing::warn!(
            max_n,
            cap = cfg.generation.max_questions_per_source,
            "coverage values exceed the generation cap; larger values repeat the capped pool"
        );
    }
    let report = coverage::coverage_sweep(
        &corpus,
        &pool,
        &cfg.analysis.n_values,
        cfg.analysis.eps,
        cfg.analysis.min_pts,
    )?;
    write_json(&report, &cfg.path(COVERAGE_FILE))?;
    Ok(report)
}

pub fn run_export(cfg: &RunConfig) -> Result<PathBuf> {
    let pool = cfg.pool()?;
    cfg.ensure_workdir()?;
    let out = cfg.path(EMBEDDINGS_EXPORT_FILE);
    eval::export_embeddings(&pool, &out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, write_synthetic, SynthConfig};

    fn setup(dir: &Path) -> RunConfig {
        let s = generate_synthetic(&SynthConfig::default()).unwrap();
        let (manifest, queries) = write_synthetic(&s, &dir.join("data")).unwrap();
        let mut cfg = RunConfig::new(manifest, dir.join("work"));
        cfg.eval_set = Some(queries);
        cfg
    }

    #[test]
    fn stages_chain_through_the_workdir() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path());
        let gw = cfg.gateway().unwrap();
        assert!(matches!(
            run_index(&cfg),
            Err(Error::MissingArtifact {
                artifact: "preQ store",
                ..
            })
        ));
        run_caption(&cfg, &gw, false).unwrap();
        assert!(run_caption(&cfg, &gw, true).unwrap().skipped_stage);
        run_generate(&cfg, &gw).unwrap();
        assert!(matches!(
            run_eval(&cfg, &gw),
            Err(Error::MissingArtifact { artifact: "index", .. })
        ));
        run_index(&cfg).unwrap();
        let report = run_eval(&cfg, &gw).unwrap();
        assert_eq!(report.recall(1), 1.0);
        assert_eq!(report.config_fingerprint, cfg.fingerprint());
        assert_eq!(run_ablation(&cfg, &gw, Ablation::Modality).unwrap().len(), 7);
        run_redundancy(&cfg).unwrap();
        run_coverage(&cfg).unwrap();
        run_export(&cfg).unwrap();
    }

    #[test]
    fn config_paths_resolve_against_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "corpus_manifest = \"data/m.jsonl\"\neval_set = \"q.jsonl\"\n[retrieval]\nmodalities = \"M,T\"\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.corpus_manifest, dir.path().join("data/m.jsonl"));
        assert_eq!(cfg.workdir, dir.path().join("work"));
        assert_eq!(cfg.retrieval.modalities.to_string(), "M+T");
        std::fs::write(&path, "corpus_manifest = \"m\"\nbogus = 1\n").unwrap();
        assert!(matches!(RunConfig::load(&path), Err(Error::Config(_))));
    }

    #[test]
    fn fingerprint_ignores_location_and_workers() {
        let a = RunConfig::new("a.jsonl", "w1");
        let mut b = RunConfig::new("b.jsonl", "w2");
        b.workers = Some(3);
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.retrieval.use_qcluster = false;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
