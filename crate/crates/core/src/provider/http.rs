//! Live backend speaking the chat-completions HTTP+JSON protocol.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{AttemptError, ChatBackend, ChatRequest, ProviderError, RawReply};

pub const DEFAULT_API_BASE: &str = "https://api.openai.com/v1";
pub const DEFAULT_MODEL: &str = "gpt-4o-mini";
pub const DEFAULT_EMBED_MODEL: &str = "text-embedding-3-small";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpConfig {
    pub api_base: String,
    pub api_key: String,
    pub model: String,
    pub embed_model: String,
    pub timeout: Duration,
}

impl HttpConfig {
    /// Read `RTP_API_BASE`, `RTP_API_KEY`, `RTP_MODEL` and `RTP_EMBED_MODEL`.
    pub fn from_env() -> Result<Self, ProviderError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    pub fn from_lookup(lookup: impl Fn(&str) -> Option<String>) -> Result<Self, ProviderError> {
        let api_key = lookup("RTP_API_KEY")
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| {
                ProviderError::Config("RTP_API_KEY is not set; required for the live backend".into())
            })?;
        Ok(Self {
            api_base: lookup("RTP_API_BASE").unwrap_or_else(|| DEFAULT_API_BASE.to_string()),
            api_key,
            model: lookup("RTP_MODEL").unwrap_or_else(|| DEFAULT_MODEL.to_string()),
            embed_model: lookup("RTP_EMBED_MODEL")
                .unwrap_or_else(|| DEFAULT_EMBED_MODEL.to_string()),
            timeout: Duration::from_secs(60),
        })
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    client: Client,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, ProviderError> {
        let client = Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ProviderError::Config(format!("building HTTP client: {e}")))?;
        Ok(Self { config, client })
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.api_base.trim_end_matches('/'), path)
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, AttemptError> {
        let response = self
            .client
            .post(self.url(path))
            .bearer_auth(&self.config.api_key)
            .json(body)
            .send()
            .map_err(|e| {
                if e.is_builder() {
                    AttemptError::Fatal(e.to_string())
                } else {
                    // timeouts, connection resets and the like
                    AttemptError::Transient {
                        status: None,
                        message: e.to_string(),
                    }
                }
            })?;
        let status = response.status();
        let text = response.text().unwrap_or_default();
        if status.is_success() {
            return serde_json::from_str(&text)
                .map_err(|e| AttemptError::Fatal(format!("invalid JSON from provider: {e}")));
        }
        Err(classify_failure(status, &text))
    }
}

fn classify_failure(status: StatusCode, body: &str) -> AttemptError {
    let parsed: Option<Value> = serde_json::from_str(body).ok();
    let code = parsed
        .as_ref()
        .and_then(|v| v.pointer("/error/code"))
        .and_then(Value::as_str)
        .unwrap_or_default();
    if is_content_filter(code) {
        return AttemptError::Refusal(code.to_string());
    }
    let message = parsed
        .as_ref()
        .and_then(|v| v.pointer("/error/message"))
        .and_then(Value::as_str)
        .map(str::to_string)
        .unwrap_or_else(|| body.chars().take(200).collect());
    if status == StatusCode::TOO_MANY_REQUESTS
        || status == StatusCode::REQUEST_TIMEOUT
        || status.is_server_error()
    {
        AttemptError::Transient {
            status: Some(status.as_u16()),
            message,
        }
    } else {
        AttemptError::Fatal(format!("HTTP {}: {message}", status.as_u16()))
    }
}

fn is_content_filter(code: &str) -> bool {
    matches!(
        code,
        "content_filter" | "content_policy_violation" | "ResponsibleAIPolicyViolation"
    )
}

/// Pull the reply text and usage out of a chat-completions response body.
pub(crate) fn parse_chat_response(body: &Value) -> Result<RawReply, AttemptError> {
    let choice = body
        .pointer("/choices/0")
        .ok_or_else(|| AttemptError::Fatal("response has no choices".into()))?;
    if choice.get("finish_reason").and_then(Value::as_str) == Some("content_filter") {
        return Err(AttemptError::Refusal("content_filter".into()));
    }
    if let Some(refusal) = choice.pointer("/message/refusal").and_then(Value::as_str) {
        return Err(AttemptError::Refusal(refusal.to_string()));
    }
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| AttemptError::Fatal("response has no message content".into()))?;
    let usage = |field: &str| {
        body.pointer(&format!("/usage/{field}"))
            .and_then(Value::as_u64)
            .unwrap_or(0)
    };
    Ok(RawReply {
        text: text.to_string(),
        prompt_tokens: usage("prompt_tokens"),
        completion_tokens: usage("completion_tokens"),
    })
}

impl ChatBackend for HttpBackend {
    fn complete(&self, req: &ChatRequest) -> Result<RawReply, AttemptError> {
        let body = json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": req.system},
                {"role": "user", "content": req.user},
            ],
            "temperature": req.temperature,
        });
        let response = self.post("chat/completions", &body)?;
        parse_chat_response(&response)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, AttemptError> {
        let body = json!({"model": self.config.embed_model, "input": texts});
        let response = self.post("embeddings", &body)?;
        let data = response
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| AttemptError::Fatal("embedding response has no data".into()))?;
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item
                .get("index")
                .and_then(Value::as_u64)
                .map(|i| i as usize)
                .unwrap_or(pos);
            let vector = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| AttemptError::Fatal("embedding item has no vector".into()))?
                .iter()
                .map(|x| {
                    x.as_f64()
                        .ok_or_else(|| AttemptError::Fatal("non-numeric embedding".into()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push((index, vector));
        }
        rows.sort_by_key(|(i, _)| *i);
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }

    fn name(&self) -> &str {
        "live"
    }
}
