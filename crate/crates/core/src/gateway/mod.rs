//! Uniform access to the chat, embedding and rerank models.
//!
//! Two backends implement [`ModelGateway`]: [`StubGateway`], which is a pure
//! function of its seed and inputs, and [`RemoteGateway`], which speaks the
//! JSON-over-HTTP protocol in [`wire`]. [`server`] serves the stub over that
//! same protocol.

pub mod prompts;
pub mod remote;
pub mod server;
pub mod stub;
pub mod wire;

use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::EmbeddingVector;

pub use prompts::{render_prompt, render_with, PromptError, RenderedPrompt, TemplateId};
pub use remote::RemoteGateway;
pub use stub::{ScenarioTable, StubGateway};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("server returned status {status} after {attempts} attempt(s): {body}")]
    Status {
        status: u16,
        body: String,
        attempts: u32,
    },
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("invalid gateway config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    Remote,
    Stub,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelNames {
    pub chat: String,
    pub text_embedding: String,
    pub image_embedding: String,
    pub reranker: String,
}

impl Default for ModelNames {
    fn default() -> Self {
        Self {
            chat: "chat".into(),
            text_embedding: "text-embedding".into(),
            image_embedding: "image-embedding".into(),
            reranker: "reranker".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub endpoint_url: String,
    pub auth_token_env_var: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub max_concurrent_requests: usize,
    pub backoff_base_ms: u64,
    pub mode: GatewayMode,
    pub stub_seed: u64,
    pub models: ModelNames,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://127.0.0.1:8089".into(),
            auth_token_env_var: "KBVQA_GATEWAY_TOKEN".into(),
            timeout_ms: 30_000,
            max_retries: 3,
            max_concurrent_requests: 8,
            backoff_base_ms: 100,
            mode: GatewayMode::Stub,
            stub_seed: 0,
            models: ModelNames::default(),
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.timeout_ms == 0 {
            return Err(GatewayError::InvalidConfig("timeout_ms must be > 0".into()));
        }
        if self.max_concurrent_requests == 0 {
            return Err(GatewayError::InvalidConfig(
                "max_concurrent_requests must be >= 1".into(),
            ));
        }
        if self.mode == GatewayMode::Remote && self.endpoint_url.trim().is_empty() {
            return Err(GatewayError::InvalidConfig(
                "endpoint_url is required in remote mode".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub template_id: Option<TemplateId>,
    pub messages: Vec<ChatMessage>,
    /// Opaque image locators attached to the request (vision models only).
    pub images: Vec<String>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn from_prompt(prompt: RenderedPrompt, image_ref: Option<&str>) -> Self {
        Self {
            template_id: Some(prompt.template_id),
            messages: vec![
                ChatMessage {
                    role: "system".into(),
                    content: prompt.system_text,
                },
                ChatMessage {
                    role: "user".into(),
                    content: prompt.user_text,
                },
            ],
            images: image_ref.map(|s| vec![s.to_string()]).unwrap_or_default(),
            temperature: 0.0,
            max_tokens: 512,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn user_text(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == "user")
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankRequest {
    pub query: String,
    /// Present for multi-modal reranking, absent for text-only reranking.
    pub image_ref: Option<String>,
    pub passages: Vec<String>,
}

/// Every model the pipeline talks to.
pub trait ModelGateway: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError>;
    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, GatewayError>;
    fn embed_image(&self, image_ref: &str) -> Result<EmbeddingVector, GatewayError>;
    /// One score per passage, in passage order.
    fn rerank(&self, request: &RerankRequest) -> Result<Vec<f64>, GatewayError>;
}

/// Builds the backend selected by `cfg.mode`.
pub fn connect(
    cfg: &GatewayConfig,
    d_vis: usize,
    d_text: usize,
) -> Result<Box<dyn ModelGateway>, GatewayError> {
    cfg.validate()?;
    Ok(match cfg.mode {
        GatewayMode::Stub => Box::new(StubGateway::new(cfg.stub_seed, d_vis, d_text)),
        GatewayMode::Remote => Box::new(RemoteGateway::new(cfg.clone(), d_vis, d_text)?),
    })
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub(crate) struct RequestLimiter {
    available: Mutex<usize>,
    cond: Condvar,
}

pub(crate) struct Permit<'a> {
    limiter: &'a RequestLimiter,
}

impl RequestLimiter {
    pub(crate) fn new(limit: usize) -> Self {
        Self {
            available: Mutex::new(limit.max(1)),
            cond: Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> Permit<'_> {
        let mut available = self.available.lock().expect("limiter poisoned");
        while *available == 0 {
            available = self.cond.wait(available).expect("limiter poisoned");
        }
        *available -= 1;
        Permit { limiter: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut available = self.limiter.available.lock().expect("limiter poisoned");
        *available += 1;
        self.limiter.cond.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    #[test]
    fn limiter_bounds_concurrency() {
        let limiter = Arc::new(RequestLimiter::new(2));
        let current = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (limiter, current, peak) = (limiter.clone(), current.clone(), peak.clone());
                std::thread::spawn(move || {
                    let _permit = limiter.acquire();
                    let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(std::time::Duration::from_millis(10));
                    current.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn config_validation() {
        let mut cfg = GatewayConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.timeout_ms = 0;
        assert!(cfg.validate().is_err());
        cfg.timeout_ms = 10;
        cfg.max_concurrent_requests = 0;
        assert!(cfg.validate().is_err());
    }
}
