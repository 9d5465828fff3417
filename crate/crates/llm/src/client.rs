//! Chat-completions requests with an embedded image, plus retry.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const API_KEY_ENV: &str = "OPENAI_API_KEY";
pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RequestParams {
    pub model_id: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    /// Vision `detail` setting sent with every image.
    pub image_detail: String,
}

impl Default for RequestParams {
    fn default() -> Self {
        RequestParams {
            model_id: "gpt-4o-2024-05-13".into(),
            temperature: 0.0,
            top_p: 1.0,
            max_tokens: 600,
            image_detail: "auto".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("connection failed: {0}")]
    Connection(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("request could not be built: {0}")]
    Request(String),
}

/// One HTTP POST of a JSON body.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &str) -> Result<HttpResponse, TransportError>;
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub fn new(timeout: Duration) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| TransportError::Request(e.to_string()))?;
        Ok(HttpTransport { client })
    }
}

impl Transport for HttpTransport {
    fn post_json(&self, url: &str, api_key: Option<&str>, body: &str) -> Result<HttpResponse, TransportError> {
        let mut req = self
            .client
            .post(url)
            .header("content-type", "application/json")
            .body(body.to_string());
        if let Some(key) = api_key {
            req = req.bearer_auth(key);
        }
        let classify = |e: reqwest::Error| {
            if e.is_timeout() {
                TransportError::Timeout(e.to_string())
            } else if e.is_builder() {
                TransportError::Request(e.to_string())
            } else {
                TransportError::Connection(e.to_string())
            }
        };
        let resp = req.send().map_err(classify)?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(classify)?;
        Ok(HttpResponse { status, body })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub url: String,
    pub api_key: Option<String>,
}

impl Endpoint {
    /// Reads the key from `OPENAI_API_KEY`; local servers usually need none.
    pub fn from_env(url: &str) -> Self {
        Endpoint {
            url: url.to_string(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 4,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self.base_delay_ms.saturating_mul(1u64 << attempt.min(20)).min(self.max_delay_ms);
        Duration::from_millis(ms)
    }
}

pub fn is_retryable_status(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("response is not a chat completion: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    /// The assistant message text.
    pub content: String,
}

/// Outcome of one call, with the retry count kept even on failure.
#[derive(Debug)]
pub struct CallResult {
    pub result: Result<Completion, ClientError>,
    pub retries: u32,
    pub network_calls: u32,
}

pub fn image_mime(bytes: &[u8]) -> &'static str {
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        "image/png"
    } else if bytes.starts_with(b"GIF8") {
        "image/gif"
    } else if bytes.len() >= 12 && &bytes[..4] == b"RIFF" && &bytes[8..12] == b"WEBP" {
        "image/webp"
    } else {
        "image/jpeg"
    }
}

pub fn data_url(bytes: &[u8]) -> String {
    format!(
        "data:{};base64,{}",
        image_mime(bytes),
        base64::engine::general_purpose::STANDARD.encode(bytes)
    )
}

pub fn request_body(params: &RequestParams, prompt: &str, image: &[u8]) -> Value {
    json!({
        "model": params.model_id,
        "temperature": params.temperature,
        "top_p": params.top_p,
        "max_tokens": params.max_tokens,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "text", "text": prompt},
                {"type": "image_url", "image_url": {"url": data_url(image), "detail": params.image_detail}}
            ]
        }]
    })
}

/// `choices[0].message.content` of a chat-completions response.
pub fn completion_content(body: &str) -> Result<String, ClientError> {
    let v: Value = serde_json::from_str(body).map_err(|e| ClientError::Malformed(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| ClientError::Malformed("missing choices[0].message.content".into()))
}

pub struct ChatClient<'a> {
    pub transport: &'a dyn Transport,
    pub endpoint: Endpoint,
    pub params: RequestParams,
    pub retry: RetryPolicy,
}

impl ChatClient<'_> {
    /// Sends one request, retrying 429, 5xx, connection errors and timeouts.
    pub fn complete(&self, prompt: &str, image: &[u8]) -> CallResult {
        let body = request_body(&self.params, prompt, image).to_string();
        let mut retries = 0;
        let mut calls = 0;
        loop {
            calls += 1;
            let outcome = self.transport.post_json(&self.endpoint.url, self.endpoint.api_key.as_deref(), &body);
            let retryable = match &outcome {
                Ok(r) => is_retryable_status(r.status),
                Err(TransportError::Request(_)) => false,
                Err(_) => true,
            };
            if retryable && retries < self.retry.max_retries {
                let delay = self.retry.delay(retries);
                match &outcome {
                    Ok(r) => log::warn!("HTTP {} from {}, retrying in {:?}", r.status, self.endpoint.url, delay),
                    Err(e) => log::warn!("{e}, retrying in {delay:?}"),
                }
                std::thread::sleep(delay);
                retries += 1;
                continue;
            }
            let result = match outcome {
                Ok(r) if r.status == 200 => completion_content(&r.body).map(|content| Completion { content }),
                Ok(r) => Err(ClientError::Http { status: r.status, body: r.body }),
                Err(e) => Err(e.into()),
            };
            return CallResult { result, retries, network_calls: calls };
        }
    }
}
