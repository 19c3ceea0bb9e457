use std::time::Duration;

use log::{debug, warn};
use reqwest::blocking::Client;
use serde::de::DeserializeOwned;
use serde::Serialize;

use super::stub::Modality;
use super::wire::{
    ChatCompletionRequest, ChatCompletionResponse, EmbeddingsRequest, EmbeddingsResponse,
    RerankWireRequest, RerankWireResponse, CHAT_PATH, EMBEDDINGS_PATH, RERANK_PATH,
};
use super::{
    ChatRequest, GatewayConfig, GatewayError, ModelGateway, RequestLimiter, RerankRequest,
};
use crate::fusion::EmbeddingVector;

/// HTTP client for the gateway wire protocol.
///
/// Transient failures (timeouts, connection errors, 429 and 5xx) are retried
/// up to `max_retries` times with exponential backoff. At most
/// `max_concurrent_requests` requests are in flight at once, whichever thread
/// issues them.
#[derive(Debug)]
pub struct RemoteGateway {
    cfg: GatewayConfig,
    client: Client,
    token: Option<String>,
    limiter: RequestLimiter,
    d_vis: usize,
    d_text: usize,
}

enum Attempt {
    Retry(GatewayError),
    Fatal(GatewayError),
}

impl RemoteGateway {
    pub fn new(cfg: GatewayConfig, d_vis: usize, d_text: usize) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let client = Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| GatewayError::InvalidConfig(e.to_string()))?;
        let token = if cfg.auth_token_env_var.is_empty() {
            None
        } else {
            std::env::var(&cfg.auth_token_env_var).ok()
        };
        if token.is_none() {
            debug!(
                "no auth token in ${}; sending unauthenticated requests",
                cfg.auth_token_env_var
            );
        }
        Ok(Self {
            limiter: RequestLimiter::new(cfg.max_concurrent_requests),
            cfg,
            client,
            token,
            d_vis,
            d_text,
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.cfg
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.cfg.endpoint_url.trim_end_matches('/'), path)
    }

    fn attempt<B: Serialize, R: DeserializeOwned>(
        &self,
        url: &str,
        body: &B,
        attempts: u32,
    ) -> Result<R, Attempt> {
        let _permit = self.limiter.acquire();
        let mut req = self.client.post(url).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                Attempt::Retry(GatewayError::Timeout { attempts })
            } else {
                Attempt::Retry(GatewayError::Transport {
                    message: e.to_string(),
                    attempts,
                })
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                Attempt::Retry(GatewayError::Timeout { attempts })
            } else {
                Attempt::Retry(GatewayError::Transport {
                    message: e.to_string(),
                    attempts,
                })
            }
        })?;
        if !status.is_success() {
            let err = GatewayError::Status {
                status: status.as_u16(),
                body: text.chars().take(512).collect(),
                attempts,
            };
            return Err(if status.is_server_error() || status.as_u16() == 429 {
                Attempt::Retry(err)
            } else {
                Attempt::Fatal(err)
            });
        }
        serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(GatewayError::MalformedResponse(e.to_string())))
    }

    fn post<B: Serialize, R: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<R, GatewayError> {
        let url = self.url(path);
        let total = self.cfg.max_retries + 1;
        let mut attempt = 1;
        loop {
            match self.attempt(&url, body, attempt) {
                Ok(r) => return Ok(r),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) if attempt >= total => return Err(e),
                Err(Attempt::Retry(e)) => {
                    let backoff = self
                        .cfg
                        .backoff_base_ms
                        .saturating_mul(1u64 << (attempt - 1).min(16));
                    warn!("{url}: attempt {attempt}/{total} failed ({e}); retrying in {backoff} ms");
                    std::thread::sleep(Duration::from_millis(backoff));
                    attempt += 1;
                }
            }
        }
    }

    fn embed(
        &self,
        model: &str,
        modality: Modality,
        input: &str,
        dim: usize,
    ) -> Result<EmbeddingVector, GatewayError> {
        let resp: EmbeddingsResponse = self.post(
            EMBEDDINGS_PATH,
            &EmbeddingsRequest {
                model: model.to_string(),
                input: vec![input.to_string()],
                modality,
                dimensions: dim,
            },
        )?;
        let datum = resp
            .data
            .into_iter()
            .find(|d| d.index == 0)
            .ok_or_else(|| GatewayError::MalformedResponse("no embedding at index 0".into()))?;
        if datum.embedding.len() != dim {
            return Err(GatewayError::MalformedResponse(format!(
                "expected {dim}-dim embedding, got {}",
                datum.embedding.len()
            )));
        }
        EmbeddingVector::new(datum.embedding)
            .map_err(|e| GatewayError::MalformedResponse(e.to_string()))
    }
}

impl ModelGateway for RemoteGateway {
    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let resp: ChatCompletionResponse = self.post(
            CHAT_PATH,
            &ChatCompletionRequest {
                model: self.cfg.models.chat.clone(),
                messages: request.messages.clone(),
                temperature: request.temperature,
                max_tokens: request.max_tokens,
                template_id: request.template_id.map(|t| t.as_str().to_string()),
                images: request.images.clone(),
            },
        )?;
        resp.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| GatewayError::MalformedResponse("empty choices".into()))
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        self.embed(&self.cfg.models.text_embedding, Modality::Text, text, self.d_text)
    }

    fn embed_image(&self, image_ref: &str) -> Result<EmbeddingVector, GatewayError> {
        self.embed(
            &self.cfg.models.image_embedding,
            Modality::Image,
            image_ref,
            self.d_vis,
        )
    }

    fn rerank(&self, request: &RerankRequest) -> Result<Vec<f64>, GatewayError> {
        let resp: RerankWireResponse = self.post(
            RERANK_PATH,
            &RerankWireRequest {
                model: self.cfg.models.reranker.clone(),
                query: request.query.clone(),
                image_ref: request.image_ref.clone(),
                documents: request.passages.clone(),
            },
        )?;
        let mut scores = vec![None; request.passages.len()];
        for r in resp.results {
            let slot = scores.get_mut(r.index).ok_or_else(|| {
                GatewayError::MalformedResponse(format!("rerank index {} out of range", r.index))
            })?;
            *slot = Some(r.relevance_score);
        }
        scores
            .into_iter()
            .enumerate()
            .map(|(i, s)| {
                s.filter(|v| v.is_finite()).ok_or_else(|| {
                    GatewayError::MalformedResponse(format!("missing rerank score for passage {i}"))
                })
            })
            .collect()
    }
}
