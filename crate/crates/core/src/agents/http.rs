//! OpenAI-compatible chat and embedding clients.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use log::warn;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::embed::{Embedder, EmbeddingVector};
use super::{AgentBackend, AgentResponse, AgentSpec, Prompt};
use crate::error::{Error, Result};

pub const API_KEY_ENV: &str = "GDESIGNER_API_KEY";

#[derive(Debug, Clone)]
pub struct HttpSettings {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub temperature: f64,
    /// Delay before each retry; its length is the retry count.
    pub backoff: Vec<Duration>,
    pub max_in_flight: usize,
    pub timeout: Duration,
}

impl HttpSettings {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            temperature: 1.0,
            backoff: vec![
                Duration::from_millis(500),
                Duration::from_secs(1),
                Duration::from_secs(2),
            ],
            max_in_flight: 4,
            timeout: Duration::from_secs(120),
        }
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{}", self.base_url.trim_end_matches('/'), path)
    }
}

/// Counting semaphore bounding concurrent requests.
struct InFlight {
    cap: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
        while *used >= self.cap {
            used = self.freed.wait(used).unwrap_or_else(|e| e.into_inner());
        }
        *used += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().unwrap_or_else(|e| e.into_inner());
        *used -= 1;
        self.0.freed.notify_one();
    }
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

struct JsonClient {
    settings: HttpSettings,
    client: Client,
    in_flight: InFlight,
}

impl JsonClient {
    fn new(settings: HttpSettings) -> Result<Self> {
        let client = Client::builder()
            .timeout(settings.timeout)
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        let in_flight = InFlight::new(settings.max_in_flight);
        Ok(Self {
            settings,
            client,
            in_flight,
        })
    }

    /// POSTs `body`, retrying transport failures, 429 and 5xx.
    fn post(&self, path: &str, body: &impl Serialize) -> Result<Value> {
        let url = self.settings.endpoint(path);
        let _slot = self.in_flight.acquire();
        let attempts = self.settings.backoff.len() + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.settings.backoff[attempt - 1]);
            }
            match self.try_post(&url, body) {
                Ok(v) => return Ok(v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    warn!("POST {url} attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                }
            }
        }
        Err(Error::Transport {
            attempts,
            message: last,
        })
    }

    fn try_post(&self, url: &str, body: &impl Serialize) -> Result<Value, Attempt> {
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.settings.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Attempt::Retry(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Attempt::Retry(e.to_string()))?;
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Err(Attempt::Retry(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(Error::Protocol(format!(
                "status {status}: {}",
                truncate(&text, 200)
            ))));
        }
        serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(Error::Protocol(format!("malformed JSON body: {e}"))))
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 2],
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
    usage: Option<ChatUsage>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChatUsage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

/// Chat backend speaking the `/chat/completions` wire format.
pub struct HttpChatBackend {
    inner: JsonClient,
}

impl HttpChatBackend {
    pub fn new(settings: HttpSettings) -> Result<Self> {
        Ok(Self {
            inner: JsonClient::new(settings)?,
        })
    }
}

impl AgentBackend for HttpChatBackend {
    fn respond(&self, agent: &AgentSpec, prompt: &Prompt, _seed: u64) -> Result<AgentResponse> {
        let body = ChatRequest {
            model: &self.inner.settings.model,
            messages: [
                ChatMessage {
                    role: "system",
                    content: &prompt.system,
                },
                ChatMessage {
                    role: "user",
                    content: &prompt.user,
                },
            ],
            temperature: self.inner.settings.temperature,
        };
        let value = self.inner.post("chat/completions", &body)?;
        let parsed: ChatResponse = serde_json::from_value(value)
            .map_err(|e| Error::Protocol(format!("unexpected chat response shape: {e}")))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| Error::Protocol("chat response has no choices[0].message.content".into()))?;
        let usage = parsed
            .usage
            .ok_or_else(|| Error::Protocol("chat response has no usage block".into()))?;
        Ok(AgentResponse {
            agent_id: agent.id,
            text,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
        })
    }

    fn max_in_flight(&self) -> usize {
        self.inner.in_flight.cap
    }
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a str,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
}

/// Embedding provider speaking the `/embeddings` wire format.
pub struct HttpEmbedder {
    inner: JsonClient,
    dim: usize,
}

impl HttpEmbedder {
    pub fn new(settings: HttpSettings, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(Self {
            inner: JsonClient::new(settings)?,
            dim,
        })
    }
}

impl Embedder for HttpEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector> {
        let body = EmbeddingRequest {
            model: &self.inner.settings.model,
            input: text,
        };
        let value = self.inner.post("embeddings", &body)?;
        let parsed: EmbeddingResponse = serde_json::from_value(value)
            .map_err(|e| Error::Protocol(format!("unexpected embedding response shape: {e}")))?;
        let values = parsed
            .data
            .into_iter()
            .next()
            .ok_or_else(|| Error::Protocol("embedding response has no data[0]".into()))?
            .embedding;
        if values.len() != self.dim {
            return Err(Error::Config(format!(
                "embedding provider returned dimension {}, configured {}",
                values.len(),
                self.dim
            )));
        }
        EmbeddingVector::normalized(values)
    }
}
