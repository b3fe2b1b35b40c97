//! Chat-vision backends.
//!
//! Every responder implements [`Backend`]. Three are provided: a live
//! chat-completions HTTP client, a rule-driven scripted mock, and a seeded
//! simulator that answers tree questions according to an [`ErrorModel`].
//! [`CachedBackend`] wraps any of them with a content-addressed response
//! cache.

mod cache;
mod live;
mod mock;
mod simulator;

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompting::RenderedPrompt;
use crate::tree::{ClassId, NodePath};

pub use cache::{CacheEntry, CacheError, CachedBackend, ResponseCache};
pub use live::{LiveBackend, LiveConfig, RateLimiter, RetryPolicy};
pub use mock::{MockRule, MockScript, ScriptedMock};
pub use simulator::{simulate_answer, ErrorModel, MisrouteRule, SimulationError, Simulator};
pub(crate) use simulator::{draw_branch, splitmix64};

/// What a request is for. Used by mocks and simulators to pick an answer;
/// never part of the cache key and never sent over the wire.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Purpose {
    Caption,
    ZeroShot,
    /// Question at the node reached by `path`.
    Node { path: NodePath },
    /// Knowledge verification of `class_id` at the node reached by `path`.
    Verify { class_id: ClassId, path: NodePath },
}

impl Purpose {
    pub fn kind(&self) -> &'static str {
        match self {
            Purpose::Caption => "caption",
            Purpose::ZeroShot => "zero_shot",
            Purpose::Node { .. } => "node",
            Purpose::Verify { .. } => "verify",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub prompt: RenderedPrompt,
    pub temperature: f64,
    pub run_index: u32,
    pub model_id: String,
    pub purpose: Purpose,
}

impl ChatRequest {
    pub fn new(prompt: RenderedPrompt, model_id: impl Into<String>, temperature: f64, run_index: u32, purpose: Purpose) -> Self {
        Self {
            prompt,
            temperature,
            run_index,
            model_id: model_id.into(),
            purpose,
        }
    }

    pub fn image_ref(&self) -> Option<&str> {
        self.prompt.image()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub latency_ms: u64,
    pub backend_id: String,
    pub cached: bool,
}

/// SHA-256 digest identifying a request's content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(pub [u8; 32]);

impl CacheKey {
    /// Digest over backend id, model id, prompt text, image content,
    /// temperature and run index. Each field is length-prefixed so field
    /// boundaries cannot alias.
    pub fn compute(backend_id: &str, request: &ChatRequest) -> Self {
        let image = request.image_ref().map(image_digest).unwrap_or([0; 32]);
        let temperature = if request.temperature == 0.0 { 0.0f64 } else { request.temperature };
        let mut hasher = Sha256::new();
        for field in [
            backend_id.as_bytes(),
            request.model_id.as_bytes(),
            request.prompt.text.as_bytes(),
            &image[..],
            &temperature.to_bits().to_le_bytes(),
            &request.run_index.to_le_bytes(),
        ] {
            hasher.update((field.len() as u64).to_le_bytes());
            hasher.update(field);
        }
        CacheKey(hasher.finalize().into())
    }

    pub fn hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(CacheKey(bytes.try_into().ok()?))
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.hex())
    }
}

/// Digest of the image bytes when `image_ref` names a readable file,
/// otherwise of the reference string itself.
pub fn image_digest(image_ref: &str) -> [u8; 32] {
    let path = Path::new(image_ref);
    match fs::read(path) {
        Ok(bytes) if path.is_file() => Sha256::digest(&bytes).into(),
        _ => {
            let mut hasher = Sha256::new();
            hasher.update(b"ref:");
            hasher.update(image_ref.as_bytes());
            hasher.finalize().into()
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("request {key}: gave up after {attempts} attempts: {last}")]
    Exhausted { key: CacheKey, attempts: u32, last: String },
    #[error("request {key}: authentication failed (HTTP {status})")]
    Auth { key: CacheKey, status: u16 },
    #[error("request {key}: endpoint rejected request (HTTP {status}): {body}")]
    Rejected { key: CacheKey, status: u16, body: String },
    #[error("request {key}: malformed reply: {detail}")]
    Malformed { key: CacheKey, detail: String },
    #[error("request {key}: {detail}")]
    Script { key: CacheKey, detail: String },
    #[error("request {key}: {source}")]
    Simulation { key: CacheKey, source: SimulationError },
    #[error("request {key}: cache: {detail}")]
    Cache { key: CacheKey, detail: String },
    #[error("request {key}: {detail}")]
    Input { key: CacheKey, detail: String },
}

impl BackendError {
    pub fn key(&self) -> CacheKey {
        match self {
            BackendError::Exhausted { key, .. }
            | BackendError::Auth { key, .. }
            | BackendError::Rejected { key, .. }
            | BackendError::Malformed { key, .. }
            | BackendError::Script { key, .. }
            | BackendError::Simulation { key, .. }
            | BackendError::Cache { key, .. }
            | BackendError::Input { key, .. } => *key,
        }
    }
}

/// A chat-vision responder. Implementations must tolerate concurrent calls.
pub trait Backend: Send + Sync {
    /// Stable identifier, part of every cache key.
    fn id(&self) -> &str;

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;

    fn key(&self, request: &ChatRequest) -> CacheKey {
        CacheKey::compute(self.id(), request)
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).send(request)
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn id(&self) -> &str {
        (**self).id()
    }

    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).send(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(text: &str) -> ChatRequest {
        ChatRequest::new(RenderedPrompt::text(text).with_image("img/1.png"), "m", 0.0, 0, Purpose::ZeroShot)
    }

    #[test]
    fn key_sensitive_to_every_field() {
        let base = request("hello");
        let k = CacheKey::compute("b", &base);
        assert_eq!(k, CacheKey::compute("b", &base.clone()));
        assert_ne!(k, CacheKey::compute("c", &base));
        let mut r = base.clone();
        r.model_id = "n".into();
        assert_ne!(k, CacheKey::compute("b", &r));
        assert_ne!(k, CacheKey::compute("b", &request("hello!")));
        let mut r = base.clone();
        r.prompt = r.prompt.with_image("img/2.png");
        assert_ne!(k, CacheKey::compute("b", &r));
        let mut r = base.clone();
        r.temperature = 0.7;
        assert_ne!(k, CacheKey::compute("b", &r));
        let mut r = base.clone();
        r.run_index = 1;
        assert_ne!(k, CacheKey::compute("b", &r));
        let mut r = base.clone();
        r.purpose = Purpose::Caption;
        assert_eq!(k, CacheKey::compute("b", &r));
    }

    #[test]
    fn key_hex_round_trip() {
        let k = CacheKey::compute("b", &request("x"));
        assert_eq!(CacheKey::from_hex(&k.hex()), Some(k));
        assert_eq!(CacheKey::from_hex("zz"), None);
    }

    #[test]
    fn field_boundaries_do_not_alias() {
        let a = ChatRequest::new(RenderedPrompt::text("bc"), "a", 0.0, 0, Purpose::ZeroShot);
        let b = ChatRequest::new(RenderedPrompt::text("c"), "ab", 0.0, 0, Purpose::ZeroShot);
        assert_ne!(CacheKey::compute("x", &a), CacheKey::compute("x", &b));
    }
}
