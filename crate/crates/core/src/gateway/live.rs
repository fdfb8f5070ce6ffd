//! OpenAI-compatible HTTP backend (`/chat/completions`, `/embeddings`).

use std::path::Path;
use std::time::Duration;

use base64::Engine as _;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{ChatRequest, GatewayError, ImageInput, ModelBackend, ProviderConfig};

pub struct LiveBackend {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: String,
}

impl LiveBackend {
    pub fn new(config: &ProviderConfig) -> Result<Self, GatewayError> {
        let api_key = std::env::var(&config.api_key_env_var)
            .map_err(|_| GatewayError::Config(format!("environment variable {} is not set", config.api_key_env_var)))?;
        Self::with_key(config, api_key)
    }

    pub fn with_key(config: &ProviderConfig, api_key: String) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.request_timeout_secs.max(1)))
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(LiveBackend {
            client,
            base_url: config.endpoint_url.trim_end_matches('/').to_string(),
            api_key,
        })
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let resp = self
            .client
            .post(format!("{}/{path}", self.base_url))
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| GatewayError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(GatewayError::Status {
                status: status.as_u16(),
                body: text,
            });
        }
        serde_json::from_str(&text).map_err(|e| GatewayError::Transport(format!("bad response body: {e}")))
    }
}

/// Chat message body: the prompt text followed by each image as a data URI
/// (or passed-through URL).
pub fn chat_body(req: &ChatRequest<'_>) -> Result<Value, GatewayError> {
    let mut content = vec![json!({ "type": "text", "text": req.prompt })];
    for image in req.images {
        content.push(json!({
            "type": "image_url",
            "image_url": { "url": image_url(image)? },
        }));
    }
    Ok(json!({
        "model": req.model,
        "temperature": req.temperature,
        "messages": [{ "role": "user", "content": content }],
    }))
}

fn image_url(image: &ImageInput) -> Result<String, GatewayError> {
    let r = &image.resolved;
    if r.starts_with("data:") || r.starts_with("http://") || r.starts_with("https://") {
        return Ok(r.clone());
    }
    let bytes = std::fs::read(r).map_err(|e| GatewayError::Image {
        path: r.clone(),
        message: e.to_string(),
    })?;
    let mime = match Path::new(r)
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        _ => "image/png",
    };
    Ok(format!(
        "data:{mime};base64,{}",
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    #[serde(default)]
    index: usize,
    embedding: Vec<f32>,
}

pub fn parse_chat_response(body: Value) -> Result<String, GatewayError> {
    let resp: ChatResponse =
        serde_json::from_value(body).map_err(|e| GatewayError::Transport(format!("bad chat response: {e}")))?;
    Ok(resp
        .choices
        .into_iter()
        .next()
        .and_then(|c| c.message.content)
        .unwrap_or_default())
}

pub fn parse_embedding_response(body: Value) -> Result<Vec<Vec<f32>>, GatewayError> {
    let mut resp: EmbeddingResponse =
        serde_json::from_value(body).map_err(|e| GatewayError::Embedding(format!("bad embedding response: {e}")))?;
    resp.data.sort_by_key(|d| d.index);
    Ok(resp.data.into_iter().map(|d| d.embedding).collect())
}

impl ModelBackend for LiveBackend {
    fn complete(&self, req: &ChatRequest<'_>) -> Result<String, GatewayError> {
        let body = chat_body(req)?;
        parse_chat_response(self.post("chat/completions", &body)?)
    }

    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        let body = json!({ "model": model, "input": texts });
        parse_embedding_response(self.post("embeddings", &body)?)
    }
}
