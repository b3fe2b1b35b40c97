use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendError, CacheKey, ChatRequest, ChatResponse};

/// Exponential backoff for transient failures (transport errors, HTTP 429
/// and 5xx).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    /// Upper bound on the total time spent sleeping between attempts.
    pub max_total_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            initial_backoff_ms: 500,
            max_total_backoff_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(1u64 << attempt.min(20)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiveConfig {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    /// Environment variable holding the bearer token. When the variable is
    /// unset no Authorization header is sent.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_backend_id")]
    pub backend_id: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Minimum spacing between request starts; 0 disables rate limiting.
    #[serde(default)]
    pub min_interval_ms: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

fn default_key_env() -> String {
    "OPENAI_API_KEY".to_string()
}

fn default_backend_id() -> String {
    "live".to_string()
}

fn default_timeout_ms() -> u64 {
    60_000
}

impl LiveConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key_env: default_key_env(),
            backend_id: default_backend_id(),
            timeout_ms: default_timeout_ms(),
            min_interval_ms: 0,
            retry: RetryPolicy::default(),
        }
    }
}

/// Spaces out request starts by at least `interval`.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(interval: Duration) -> Self {
        Self {
            interval,
            next: Mutex::new(None),
        }
    }

    /// Blocks until this caller's slot arrives.
    pub fn acquire(&self) {
        if self.interval.is_zero() {
            return;
        }
        let wait = {
            let mut next = self.next.lock().expect("rate limiter lock");
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

/// Client for a chat-completions style endpoint. The user message carries
/// the prompt text and, when the request has an image, one `image_url` part
/// holding either the URL itself or a base64 data URL of the file.
pub struct LiveBackend {
    config: LiveConfig,
    agent: ureq::Agent,
    limiter: RateLimiter,
}

enum Attempt {
    Done(String),
    Retry(String),
    Fatal(BackendError),
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .build()
            .into();
        let limiter = RateLimiter::new(Duration::from_millis(config.min_interval_ms));
        Self { config, agent, limiter }
    }

    pub fn config(&self) -> &LiveConfig {
        &self.config
    }

    fn body(&self, request: &ChatRequest, key: CacheKey) -> Result<Value, BackendError> {
        let mut content = vec![json!({"type": "text", "text": request.prompt.text})];
        if let Some(image) = request.image_ref() {
            let url = image_url(image).map_err(|detail| BackendError::Input { key, detail })?;
            content.push(json!({"type": "image_url", "image_url": {"url": url}}));
        }
        Ok(json!({
            "model": request.model_id,
            "temperature": request.temperature,
            "messages": [{"role": "user", "content": content}],
        }))
    }

    fn attempt(&self, body: &Value, key: CacheKey) -> Attempt {
        self.limiter.acquire();
        let mut call = self.agent.post(&self.config.endpoint);
        if let Ok(token) = std::env::var(&self.config.api_key_env) {
            call = call.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = match call.send_json(body) {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(format!("transport: {e}")),
        };
        let status = response.status().as_u16();
        let text = match response.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(format!("reading body: {e}")),
        };
        match status {
            200..=299 => match completion_text(&text) {
                Ok(content) => Attempt::Done(content),
                Err(detail) => Attempt::Fatal(BackendError::Malformed { key, detail }),
            },
            401 | 403 => Attempt::Fatal(BackendError::Auth { key, status }),
            429 | 500..=599 => Attempt::Retry(format!("HTTP {status}")),
            _ => Attempt::Fatal(BackendError::Rejected {
                key,
                status,
                body: text.chars().take(500).collect(),
            }),
        }
    }
}

impl Backend for LiveBackend {
    fn id(&self) -> &str {
        &self.config.backend_id
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let key = self.key(request);
        let body = self.body(request, key)?;
        let policy = &self.config.retry;
        let started = Instant::now();
        let mut slept = Duration::ZERO;
        let mut attempts = 0;
        loop {
            attempts += 1;
            let last = match self.attempt(&body, key) {
                Attempt::Done(text) => {
                    return Ok(ChatResponse {
                        text,
                        latency_ms: started.elapsed().as_millis() as u64,
                        backend_id: self.config.backend_id.clone(),
                        cached: false,
                    })
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry(reason) => reason,
            };
            let delay = policy.delay(attempts - 1);
            let ceiling = Duration::from_millis(policy.max_total_backoff_ms);
            if attempts >= policy.max_attempts || slept + delay > ceiling {
                return Err(BackendError::Exhausted { key, attempts, last });
            }
            tracing::warn!(%key, attempt = attempts, delay_ms = delay.as_millis() as u64, reason = %last, "retrying request");
            std::thread::sleep(delay);
            slept += delay;
        }
    }
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

fn completion_text(body: &str) -> Result<String, String> {
    let parsed: Completion = serde_json::from_str(body).map_err(|e| format!("not a completion object: {e}"))?;
    let choice = parsed.choices.into_iter().next().ok_or("reply has no choices")?;
    choice.message.content.ok_or_else(|| "first choice has no text content".to_string())
}

fn image_url(image: &str) -> Result<String, String> {
    if image.starts_with("http://") || image.starts_with("https://") || image.starts_with("data:") {
        return Ok(image.to_string());
    }
    let path = Path::new(image);
    let bytes = fs::read(path).map_err(|e| format!("cannot read image {image}: {e}"))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("ppm") => "image/x-portable-pixmap",
        _ => "image/png",
    };
    Ok(format!(
        "data:{mime};base64,{}",
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}
