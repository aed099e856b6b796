//! OpenAI-compatible HTTP providers: embeddings, question generation and the
//! model under test.
//!
//! Each client caps concurrent requests and optionally rate-limits them.
//! Bearer tokens come from `SEA_EMBED_API_KEY`, `SEA_GEN_API_KEY` and
//! `SEA_TESTEE_API_KEY`; a missing key sends no authorization header.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::{json, Value};

use sea_core::budget::Usage;
use sea_core::embedding::{EmbedBatch, EmbedError, Embedder};
use sea_core::qa::{GenError, GenerationReply, GenerationRequest, QuestionGenerator};
use sea_core::testee::{Testee, TesteeError, TesteeQuery, TesteeReply};

pub const EMBED_KEY: &str = "SEA_EMBED_API_KEY";
pub const GEN_KEY: &str = "SEA_GEN_API_KEY";
pub const TESTEE_KEY: &str = "SEA_TESTEE_API_KEY";

/// Bounds requests in flight and, optionally, their start rate.
pub struct Gate {
    max_in_flight: usize,
    in_flight: Mutex<usize>,
    freed: Condvar,
    /// Token bucket: (tokens, last refill).
    bucket: Option<(f64, Mutex<(f64, Instant)>)>,
}

pub struct Permit<'a>(&'a Gate);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.in_flight.lock().expect("gate lock");
        *n -= 1;
        self.0.freed.notify_one();
    }
}

impl Gate {
    /// `rate` is requests per second; bursts up to one second's worth.
    pub fn new(max_in_flight: usize, rate: Option<f64>) -> Self {
        Self {
            max_in_flight: max_in_flight.max(1),
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            bucket: rate
                .filter(|r| *r > 0.0)
                .map(|r| (r, Mutex::new((r.max(1.0), Instant::now())))),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        if let Some((rate, bucket)) = &self.bucket {
            loop {
                let wait = {
                    let mut b = bucket.lock().expect("bucket lock");
                    let now = Instant::now();
                    b.0 = (b.0 + now.duration_since(b.1).as_secs_f64() * rate).min(rate.max(1.0));
                    b.1 = now;
                    if b.0 >= 1.0 {
                        b.0 -= 1.0;
                        None
                    } else {
                        Some(Duration::from_secs_f64((1.0 - b.0) / rate))
                    }
                };
                match wait {
                    Some(d) => std::thread::sleep(d),
                    None => break,
                }
            }
        }
        let mut n = self.in_flight.lock().expect("gate lock");
        while *n >= self.max_in_flight {
            n = self.freed.wait(n).expect("gate lock");
        }
        *n += 1;
        Permit(self)
    }

    pub fn in_flight(&self) -> usize {
        *self.in_flight.lock().expect("gate lock")
    }
}

/// How a failed request should be treated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Failure {
    /// Network error, timeout, 429 or 5xx: worth retrying.
    Transport(String),
    /// Any other rejection or an unreadable body.
    Provider(String),
}

/// A JSON-over-HTTP endpoint with bearer auth.
pub struct Endpoint {
    client: reqwest::blocking::Client,
    base_url: String,
    key: Option<String>,
    gate: Gate,
}

impl Endpoint {
    pub fn new(base_url: &str, key_var: &str, timeout: Duration, max_in_flight: usize, rate: Option<f64>) -> Result<Self, String> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| e.to_string())?;
        let key = std::env::var(key_var).ok().filter(|k| !k.is_empty());
        if key.is_none() {
            log::warn!("{key_var} is not set; requests to {base_url} carry no credentials");
        }
        Ok(Self {
            client,
            base_url: base_url.trim_end_matches('/').to_string(),
            key,
            gate: Gate::new(max_in_flight, rate),
        })
    }

    pub fn post(&self, path: &str, body: &Value) -> Result<Value, Failure> {
        let _permit = self.gate.acquire();
        let mut req = self.client.post(format!("{}/{path}", self.base_url)).json(body);
        if let Some(k) = &self.key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| Failure::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Failure::Transport(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Failure::Transport(format!("HTTP {status}: {}", snippet(&text))));
        }
        if !status.is_success() {
            return Err(Failure::Provider(format!("HTTP {status}: {}", snippet(&text))));
        }
        serde_json::from_str(&text).map_err(|e| Failure::Provider(format!("invalid JSON reply: {e}")))
    }
}

fn snippet(text: &str) -> String {
    text.chars().take(300).collect()
}

#[derive(Deserialize)]
struct UsageBlock {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

fn usage_of(v: &Value) -> Option<Usage> {
    let u: UsageBlock = serde_json::from_value(v.get("usage")?.clone()).ok()?;
    Some(Usage::new(u.prompt_tokens, u.completion_tokens))
}

/// Text of `choices[0].message.content`.
fn chat_content(v: &Value) -> Result<String, Failure> {
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Failure::Provider("reply has no choices[0].message.content".into()))
}

/// `POST {base_url}/embeddings`.
pub struct RemoteEmbedder {
    endpoint: Endpoint,
    model: String,
    dim: usize,
}

impl RemoteEmbedder {
    pub fn new(endpoint: Endpoint, model: &str, dim: usize) -> Self {
        Self {
            endpoint,
            model: model.to_string(),
            dim,
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn model_tag(&self) -> &str {
        &self.model
    }

    fn fingerprint(&self) -> String {
        format!("remote:{}:{}:d{}", self.endpoint.base_url, self.model, self.dim)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<EmbedBatch, EmbedError> {
        let body = json!({ "model": self.model, "input": texts });
        let reply = self.endpoint.post("embeddings", &body).map_err(|f| match f {
            Failure::Transport(m) => EmbedError::Transport(m),
            Failure::Provider(m) => EmbedError::Provider(m),
        })?;
        let data = reply
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbedError::Provider("reply has no data array".into()))?;
        let mut rows: Vec<(usize, Vec<f32>)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
            let v: Vec<f32> = serde_json::from_value(item.get("embedding").cloned().unwrap_or(Value::Null))
                .map_err(|e| EmbedError::Provider(format!("bad embedding at {pos}: {e}")))?;
            rows.push((index, v));
        }
        rows.sort_by_key(|r| r.0);
        let usage = usage_of(&reply).or_else(|| Some(Usage::estimate(&texts.concat(), "")));
        Ok(EmbedBatch {
            vectors: rows.into_iter().map(|r| r.1).collect(),
            usage,
        })
    }
}

/// Model under test behind `POST {base_url}/chat/completions`.
pub struct ChatTestee {
    endpoint: Endpoint,
    model: String,
    temperature: f64,
    top_p: f64,
}

impl ChatTestee {
    pub fn new(endpoint: Endpoint, model: &str, temperature: f64, top_p: f64) -> Self {
        Self {
            endpoint,
            model: model.to_string(),
            temperature,
            top_p,
        }
    }
}

impl Testee for ChatTestee {
    fn model_tag(&self) -> &str {
        &self.model
    }

    fn fingerprint(&self) -> String {
        format!(
            "chat:{}:{}:t{}:p{}",
            self.endpoint.base_url, self.model, self.temperature, self.top_p
        )
    }

    fn respond(&self, query: &TesteeQuery<'_>) -> Result<TesteeReply, TesteeError> {
        let body = json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": query.prompt }],
            "temperature": self.temperature,
            "top_p": self.top_p,
        });
        let map = |f| match f {
            Failure::Transport(m) => TesteeError::Transport(m),
            Failure::Provider(m) => TesteeError::Provider(m),
        };
        let reply = self.endpoint.post("chat/completions", &body).map_err(map)?;
        Ok(TesteeReply {
            text: chat_content(&reply).map_err(map)?,
            usage: usage_of(&reply),
        })
    }
}

/// Question generator behind `POST {base_url}/chat/completions`.
pub struct ChatGenerator {
    endpoint: Endpoint,
    model: String,
}

impl ChatGenerator {
    pub fn new(endpoint: Endpoint, model: &str) -> Self {
        Self {
            endpoint,
            model: model.to_string(),
        }
    }
}

impl QuestionGenerator for ChatGenerator {
    fn model_tag(&self) -> &str {
        &self.model
    }

    fn fingerprint(&self) -> String {
        format!("chat:{}:{}", self.endpoint.base_url, self.model)
    }

    fn generate(&self, req: &GenerationRequest<'_>) -> Result<GenerationReply, GenError> {
        let body = json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": req.prompt }],
            "seed": req.seed,
        });
        let map = |f| match f {
            Failure::Transport(m) => GenError::Transport(m),
            Failure::Provider(m) => GenError::Provider(m),
        };
        let reply = self.endpoint.post("chat/completions", &body).map_err(map)?;
        Ok(GenerationReply {
            text: chat_content(&reply).map_err(map)?,
            usage: usage_of(&reply),
        })
    }
}
