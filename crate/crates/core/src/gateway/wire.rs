//! JSON wire schema shared by [`RemoteGateway`](super::RemoteGateway) and the
//! stub server.
//!
//! | Endpoint                     | Request                     | Response                   |
//! |------------------------------|-----------------------------|----------------------------|
//! | `POST /v1/chat/completions`  | [`ChatCompletionRequest`]   | [`ChatCompletionResponse`] |
//! | `POST /v1/embeddings`        | [`EmbeddingsRequest`]       | [`EmbeddingsResponse`]     |
//! | `POST /v1/rerank`            | [`RerankWireRequest`]       | [`RerankWireResponse`]     |
//! | `GET /v1/stats`              | -                           | [`ServerStats`]            |
//!
//! Auth is `Authorization: Bearer <token>` when a token is configured.

use serde::{Deserialize, Serialize};

use super::stub::Modality;
use super::ChatMessage;

pub const CHAT_PATH: &str = "/v1/chat/completions";
pub const EMBEDDINGS_PATH: &str = "/v1/embeddings";
pub const RERANK_PATH: &str = "/v1/rerank";
pub const STATS_PATH: &str = "/v1/stats";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatCompletionRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatChoice {
    #[serde(default)]
    pub index: usize,
    pub message: ChatMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatCompletionResponse {
    pub choices: Vec<ChatChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingsRequest {
    pub model: String,
    pub input: Vec<String>,
    pub modality: Modality,
    pub dimensions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDatum {
    pub index: usize,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingsResponse {
    pub data: Vec<EmbeddingDatum>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankWireRequest {
    pub model: String,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub documents: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankResult {
    pub index: usize,
    pub relevance_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankWireResponse {
    pub results: Vec<RerankResult>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerStats {
    pub requests: u64,
    pub in_flight: u64,
    pub max_in_flight: u64,
    pub last_authorization: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chat_request_field_names() {
        let req = ChatCompletionRequest {
            model: "m".into(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: "hi".into(),
            }],
            temperature: 0.0,
            max_tokens: 8,
            template_id: None,
            images: vec![],
        };
        let v = serde_json::to_value(&req).unwrap();
        assert_eq!(
            v,
            serde_json::json!({
                "model": "m",
                "messages": [{"role": "user", "content": "hi"}],
                "temperature": 0.0,
                "max_tokens": 8
            })
        );
    }

    #[test]
    fn commodity_responses_parse() {
        let chat: ChatCompletionResponse = serde_json::from_str(
            r#"{"id":"x","object":"chat.completion","choices":[{"index":0,"message":{"role":"assistant","content":"ok"},"finish_reason":"stop"}]}"#,
        )
        .unwrap();
        assert_eq!(chat.choices[0].message.content, "ok");
        let emb: EmbeddingsResponse = serde_json::from_str(
            r#"{"object":"list","data":[{"object":"embedding","index":0,"embedding":[0.5,0.5]}],"model":"m"}"#,
        )
        .unwrap();
        assert_eq!(emb.data[0].embedding, vec![0.5, 0.5]);
        let rr: RerankWireResponse =
            serde_json::from_str(r#"{"results":[{"index":1,"relevance_score":0.9}]}"#).unwrap();
        assert_eq!(rr.results[0].index, 1);
    }
}
