use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::ImageRef;

/// Chat-completion request as sent over the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub system: String,
    pub prompt: String,
    pub image: Option<ImageRef>,
}

impl ChatRequest {
    /// OpenAI-style `messages` body. Images become an `image_url` part.
    pub fn to_json(&self) -> Value {
        let user = match &self.image {
            None => json!(self.prompt),
            Some(img) => json!([
                {"type": "text", "text": self.prompt},
                {"type": "image_url", "image_url": {"url": img.uri}},
            ]),
        };
        json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": self.system},
                {"role": "user", "content": user},
            ],
        })
    }
}

/// Returns the assistant message text, or a transport failure message.
pub trait Transport: Send + Sync {
    fn complete(&self, req: &ChatRequest) -> Result<String, String>;

    /// Short description for report metadata.
    fn describe(&self) -> String;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointConfig {
    /// Chat-completions URL; offline heuristic when unset.
    pub url: Option<String>,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    pub max_retries: u32,
    /// First retry delay; doubles on each further retry.
    pub backoff_ms: u64,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: None,
            model: "default".into(),
            token_env: "RAPT_LLM_TOKEN".into(),
            temperature: 0.0,
            timeout_secs: 60,
            max_retries: 2,
            backoff_ms: 500,
        }
    }
}

impl EndpointConfig {
    pub fn backoff(&self, retry: u32) -> Duration {
        Duration::from_millis(self.backoff_ms.saturating_mul(1 << retry.min(16)))
    }
}

/// Blocking HTTP transport.
pub struct HttpTransport {
    url: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpTransport {
    /// `None` when no URL is configured.
    pub fn from_config(cfg: &EndpointConfig) -> Option<Self> {
        let url = cfg.url.clone()?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        Some(Self {
            url,
            token: std::env::var(&cfg.token_env).ok().filter(|t| !t.is_empty()),
            agent,
        })
    }
}

/// Pulls `choices[0].message.content` out of a chat-completion body.
pub fn extract_content(body: &str) -> Result<String, String> {
    let v: Value = serde_json::from_str(body).map_err(|e| format!("response is not JSON: {e}"))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_owned)
        .ok_or_else(|| "response has no choices[0].message.content".to_string())
}

impl Transport for HttpTransport {
    fn complete(&self, req: &ChatRequest) -> Result<String, String> {
        let body = req.to_json().to_string();
        let mut call = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(t) = &self.token {
            call = call.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = call.send(body.as_str()).map_err(|e| e.to_string())?;
        let status = resp.status();
        let text = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        if !status.is_success() {
            return Err(format!("HTTP {status}: {text}"));
        }
        extract_content(&text)
    }

    fn describe(&self) -> String {
        format!("http {}", self.url)
    }
}

/// In-process transport for tests and offline runs.
pub struct MockTransport {
    script: Mutex<VecDeque<Result<String, String>>>,
    responder: Option<Box<dyn Fn(&ChatRequest) -> String + Send + Sync>>,
    calls: Mutex<usize>,
}

impl MockTransport {
    /// Replays `responses` in order; once exhausted, repeats a transport
    /// error.
    pub fn scripted(responses: Vec<Result<String, String>>) -> Self {
        Self {
            script: Mutex::new(responses.into()),
            responder: None,
            calls: Mutex::new(0),
        }
    }

    /// Answers every request with `f(request)`.
    pub fn from_fn(f: impl Fn(&ChatRequest) -> String + Send + Sync + 'static) -> Self {
        Self {
            script: Mutex::new(VecDeque::new()),
            responder: Some(Box::new(f)),
            calls: Mutex::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        *self.calls.lock().expect("mock lock")
    }
}

impl Transport for MockTransport {
    fn complete(&self, req: &ChatRequest) -> Result<String, String> {
        *self.calls.lock().expect("mock lock") += 1;
        if let Some(next) = self.script.lock().expect("mock lock").pop_front() {
            return next;
        }
        match &self.responder {
            Some(f) => Ok(f(req)),
            None => Err("mock script exhausted".into()),
        }
    }

    fn describe(&self) -> String {
        "mock".into()
    }
}
