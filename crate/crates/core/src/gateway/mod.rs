//! One entry point for every model call: component captioning, question
//! generation, group ranking and text embedding.
//!
//! [`ModelGateway`] owns prompt rendering, output parsing, retries and the
//! in-flight request bound. The transport sits behind [`ModelBackend`]: an
//! OpenAI-compatible HTTP client ([`live::LiveBackend`]) or a deterministic
//! stand-in for tests and dry runs ([`mock::MockBackend`]).

pub mod live;
pub mod mock;
pub mod parse;
pub mod prompts;

use std::path::PathBuf;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::ComponentKind;
use prompts::PromptTemplates;

pub use mock::{MockConfig, RankerBehavior};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    #[default]
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Textual,
    Visual,
    Multimodal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub backend: BackendKind,
    pub endpoint_url: String,
    pub api_key_env_var: String,
    /// Model for page-image and component-image question generation.
    pub chat_model_name: String,
    /// Model for surrogate-text question generation; defaults to `chat_model_name`.
    pub textual_model_name: Option<String>,
    /// Model for group ranking; defaults to `chat_model_name`.
    pub rank_model_name: Option<String>,
    pub caption_model_name: String,
    pub embed_model_name: String,
    /// Expected embedding dimension. Live responses of any other size are
    /// rejected; the mock backend embeds into this many buckets.
    pub embed_dimension: Option<usize>,
    pub embed_batch_size: usize,
    pub max_parallel_requests: usize,
    pub retry_limit: u32,
    pub retry_backoff_ms: u64,
    pub request_timeout_secs: u64,
    pub temperature: f32,
    pub prompt_dir: Option<PathBuf>,
    pub mock: MockConfig,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            backend: BackendKind::Mock,
            endpoint_url: "https://api.openai.com/v1".into(),
            api_key_env_var: "OPENAI_API_KEY".into(),
            chat_model_name: "gpt-4o".into(),
            textual_model_name: Some("gpt-4o-mini".into()),
            rank_model_name: None,
            caption_model_name: "gpt-4o-mini".into(),
            embed_model_name: "text-embedding-3-large".into(),
            embed_dimension: None,
            embed_batch_size: 128,
            max_parallel_requests: 8,
            retry_limit: 3,
            retry_backoff_ms: 500,
            request_timeout_secs: 120,
            temperature: 0.0,
            prompt_dir: None,
            mock: MockConfig::default(),
        }
    }
}

impl ProviderConfig {
    pub fn mock() -> Self {
        ProviderConfig::default()
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_parallel_requests < 1 {
            return Err(GatewayError::Config("max_parallel_requests must be at least 1".into()));
        }
        if self.retry_limit > 10 {
            return Err(GatewayError::Config("retry_limit must be at most 10".into()));
        }
        if self.embed_batch_size < 1 {
            return Err(GatewayError::Config("embed_batch_size must be at least 1".into()));
        }
        if self.embed_dimension == Some(0) {
            return Err(GatewayError::Config("embed_dimension must be positive".into()));
        }
        Ok(())
    }

    fn model_for(&self, kind: PromptKind) -> &str {
        match kind {
            PromptKind::Textual => self.textual_model_name.as_deref().unwrap_or(&self.chat_model_name),
            PromptKind::Visual | PromptKind::Multimodal => &self.chat_model_name,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("provider returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("cannot read image `{path}`: {message}")]
    Image { path: String, message: String },
    #[error("model returned empty output")]
    EmptyOutput,
    #[error("unparseable question list ({message}); raw output: {raw}")]
    Generation { message: String, raw: String },
    #[error("no valid group numbers in ranking output: {raw:?}")]
    Ranking { raw: String },
    #[error("embedding error: {0}")]
    Embedding(String),
    #[error("embedding dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("payload does not match prompt kind {0:?}")]
    PayloadMismatch(PromptKind),
    #[error("provider configuration: {0}")]
    Config(String),
}

impl GatewayError {
    /// Whether the same request might succeed if sent again.
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Transport(_) | GatewayError::EmptyOutput => true,
            GatewayError::Status { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// An image reference as written in the corpus (`raw`) and as resolved
/// against the corpus directory (`resolved`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageInput {
    pub raw: String,
    pub resolved: String,
}

impl ImageInput {
    pub fn new(raw: impl Into<String>, resolved: impl Into<String>) -> Self {
        ImageInput {
            raw: raw.into(),
            resolved: resolved.into(),
        }
    }

    pub fn unresolved(raw: impl Into<String>) -> Self {
        let raw = raw.into();
        ImageInput {
            resolved: raw.clone(),
            raw,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum QuestionPayload<'a> {
    Text(&'a str),
    Image(&'a ImageInput),
}

/// What a chat request is for. Live backends only look at the rendered
/// prompt; the mock backend answers from this.
#[derive(Debug, Clone, Copy)]
pub enum Task<'a> {
    Caption {
        kind: ComponentKind,
        image: &'a ImageInput,
    },
    Questions {
        kind: PromptKind,
        max_questions: usize,
        payload: QuestionPayload<'a>,
    },
    RankGroups {
        group_count: usize,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct ChatRequest<'a> {
    pub model: &'a str,
    pub prompt: &'a str,
    pub images: &'a [&'a ImageInput],
    pub temperature: f32,
    pub task: Task<'a>,
}

pub trait ModelBackend: Send + Sync {
    fn complete(&self, req: &ChatRequest<'_>) -> Result<String, GatewayError>;
    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError>;
}

/// A unit-length embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Scales `values` to unit L2 norm.
    pub fn normalized(values: Vec<f32>) -> Result<Self, GatewayError> {
        let norm = values.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
        if values.is_empty() || !norm.is_finite() || norm == 0.0 {
            return Err(GatewayError::Embedding("vector has zero or non-finite norm".into()));
        }
        Ok(EmbeddingVector(
            values.into_iter().map(|v| (f64::from(v) / norm) as f32).collect(),
        ))
    }

    /// Wraps values that are already unit length (e.g. read back from disk).
    pub fn from_unit(values: Vec<f32>) -> Self {
        EmbeddingVector(values)
    }

    pub fn dimension(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn into_values(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
    }
}

/// Counting semaphore bounding in-flight backend calls.
struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(max: usize) -> Self {
        Limiter {
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            max: max.max(1),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= self.max {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.0.freed.notify_one();
    }
}

pub struct ModelGateway {
    config: ProviderConfig,
    prompts: PromptTemplates,
    backend: Box<dyn ModelBackend>,
    limiter: Limiter,
}

impl std::fmt::Debug for ModelGateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelGateway")
            .field("backend", &self.config.backend)
            .field("max_parallel_requests", &self.config.max_parallel_requests)
            .finish_non_exhaustive()
    }
}

impl ModelGateway {
    pub fn from_config(config: ProviderConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let backend: Box<dyn ModelBackend> = match config.backend {
            BackendKind::Mock => Box::new(mock::MockBackend::new(
                config.mock.clone(),
                config.embed_dimension.unwrap_or(mock::DEFAULT_MOCK_DIM),
            )),
            BackendKind::Live => Box::new(live::LiveBackend::new(&config)?),
        };
        Self::with_backend(config, backend)
    }

    /// A mock gateway with default provider settings.
    pub fn mock(mock: MockConfig) -> Self {
        let config = ProviderConfig {
            mock,
            ..ProviderConfig::mock()
        };
        Self::from_config(config).expect("default mock config is valid")
    }

    pub fn with_backend(config: ProviderConfig, backend: Box<dyn ModelBackend>) -> Result<Self, GatewayError> {
        config.validate()?;
        let prompts = match &config.prompt_dir {
            Some(dir) => PromptTemplates::from_dir(dir).map_err(|e| GatewayError::Config(e.to_string()))?,
            None => PromptTemplates::default(),
        };
        let limiter = Limiter::new(config.max_parallel_requests);
        Ok(ModelGateway {
            config,
            prompts,
            backend,
            limiter,
        })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn prompts(&self) -> &PromptTemplates {
        &self.prompts
    }

    /// Runs `call` under the parallelism bound, retrying retryable failures
    /// with exponential backoff up to `retry_limit` times.
    fn call<T>(&self, mut call: impl FnMut() -> Result<T, GatewayError>) -> Result<T, GatewayError> {
        let mut attempt = 0u32;
        loop {
            let result = {
                let _permit = self.limiter.acquire();
                call()
            };
            match result {
                Err(e) if e.is_retryable() && attempt < self.config.retry_limit => {
                    let delay = self
                        .config
                        .retry_backoff_ms
                        .saturating_mul(1 << attempt.min(16))
                        .min(60_000);
                    tracing::debug!(attempt, delay_ms = delay, error = %e, "retrying model call");
                    if delay > 0 {
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                    attempt += 1;
                }
                other => return other,
            }
        }
    }

    fn complete_nonempty(&self, req: &ChatRequest<'_>) -> Result<String, GatewayError> {
        self.call(|| {
            let out = self.backend.complete(req)?;
            if out.trim().is_empty() {
                Err(GatewayError::EmptyOutput)
            } else {
                Ok(out)
            }
        })
    }

    /// Describes one table, figure, chart or diagram image.
    pub fn caption_component(&self, image: &ImageInput, kind: ComponentKind) -> Result<String, GatewayError> {
        let images = [image];
        let req = ChatRequest {
            model: &self.config.caption_model_name,
            prompt: &self.prompts.caption,
            images: &images,
            temperature: self.config.temperature,
            task: Task::Caption { kind, image },
        };
        Ok(self.complete_nonempty(&req)?.trim().to_string())
    }

    /// Generates at most `max_questions` questions about a text or image.
    ///
    /// Unparseable output is re-requested up to `retry_limit` times before
    /// failing with the last raw output attached.
    pub fn generate_questions(
        &self,
        kind: PromptKind,
        payload: QuestionPayload<'_>,
        max_questions: usize,
    ) -> Result<Vec<String>, GatewayError> {
        if max_questions == 0 {
            return Err(GatewayError::Config("max_questions must be at least 1".into()));
        }
        let max_str = max_questions.to_string();
        let (prompt, images): (String, Vec<&ImageInput>) = match (kind, payload) {
            (PromptKind::Textual, QuestionPayload::Text(text)) => (
                prompts::render(
                    &self.prompts.textual,
                    &[
                        (prompts::SLOT_MAX_QUESTIONS, &max_str),
                        (prompts::SLOT_DOCUMENT_TEXT, text),
                    ],
                ),
                Vec::new(),
            ),
            (PromptKind::Visual | PromptKind::Multimodal, QuestionPayload::Image(image)) => (
                prompts::render(&self.prompts.visual, &[(prompts::SLOT_MAX_QUESTIONS, &max_str)]),
                vec![image],
            ),
            _ => return Err(GatewayError::PayloadMismatch(kind)),
        };
        let req = ChatRequest {
            model: self.config.model_for(kind),
            prompt: &prompt,
            images: &images,
            temperature: self.config.temperature,
            task: Task::Questions {
                kind,
                max_questions,
                payload,
            },
        };

        let mut last = None;
        for _ in 0..=self.config.retry_limit {
            let raw = self.call(|| self.backend.complete(&req))?;
            match parse::parse_questions(&raw) {
                Ok(mut questions) => {
                    questions.truncate(max_questions);
                    return Ok(questions);
                }
                Err(message) => {
                    tracing::debug!(?kind, %message, "unparseable question output");
                    last = Some((message, raw));
                }
            }
        }
        let (message, raw) = last.expect("at least one attempt");
        Err(GatewayError::Generation { message, raw })
    }

    /// Asks the ranking model to order up to five of `group_count` groups.
    /// Returns 1-based group numbers in model order.
    pub fn rank_groups_llm(
        &self,
        query: &str,
        groups_text: &str,
        group_count: usize,
    ) -> Result<Vec<usize>, GatewayError> {
        let prompt = prompts::render(
            &self.prompts.rank,
            &[
                (prompts::SLOT_QUERY, query),
                (prompts::SLOT_QUESTIONS_TEXT, groups_text),
            ],
        );
        let req = ChatRequest {
            model: self
                .config
                .rank_model_name
                .as_deref()
                .unwrap_or(&self.config.chat_model_name),
            prompt: &prompt,
            images: &[],
            temperature: self.config.temperature,
            task: Task::RankGroups { group_count },
        };
        let raw = self.call(|| self.backend.complete(&req))?;
        parse::parse_rank(&raw, group_count).ok_or(GatewayError::Ranking { raw })
    }

    /// Embeds each text into a unit-length vector, batching requests.
    pub fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, GatewayError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(GatewayError::EmptyText);
        }
        let mut expected = self.config.embed_dimension;
        let mut out = Vec::with_capacity(texts.len());
        for batch in texts.chunks(self.config.embed_batch_size) {
            let raw = self.call(|| self.backend.embed(&self.config.embed_model_name, batch))?;
            if raw.len() != batch.len() {
                return Err(GatewayError::Embedding(format!(
                    "expected {} vectors, got {}",
                    batch.len(),
                    raw.len()
                )));
            }
            for values in raw {
                let dim = *expected.get_or_insert(values.len());
                if values.len() != dim {
                    return Err(GatewayError::DimensionMismatch {
                        expected: dim,
                        found: values.len(),
                    });
                }
                out.push(EmbeddingVector::normalized(values)?);
            }
        }
        Ok(out)
    }

    pub fn embed_text(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        let mut v = self.embed_texts(&[text.to_string()])?;
        Ok(v.pop().expect("one vector per text"))
    }
}
