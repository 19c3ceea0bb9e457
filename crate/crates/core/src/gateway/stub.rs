//! Deterministic stand-in for every model.
//!
//! Embeddings are feature-hashed bags of tokens: each lower-cased alphanumeric
//! token maps to a pseudo-random direction seeded by SHA-256 of
//! `(seed, modality, token)`, the directions are summed and the sum is
//! L2-normalized. Texts sharing tokens therefore land near each other, and
//! every output is a pure function of the seed and the input.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatRequest, GatewayError, ModelGateway, RerankRequest, TemplateId};
use crate::fusion::{cosine_slices, EmbeddingVector};

/// Dimension of the hidden text space used for stub rerank scores.
pub const STUB_RERANK_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

impl Modality {
    fn tag(self) -> u8 {
        match self {
            Modality::Text => b't',
            Modality::Image => b'i',
        }
    }
}

/// Canned chat responses keyed by template; templates without an entry use
/// the built-in default behavior.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScenarioTable {
    pub responses: BTreeMap<TemplateId, String>,
}

impl ScenarioTable {
    pub fn with(mut self, template: TemplateId, response: impl Into<String>) -> Self {
        self.responses.insert(template, response.into());
        self
    }
}

pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

fn token_seed(seed: u64, modality: Modality, token: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([modality.tag()]);
    h.update(token);
    h.finalize().into()
}

pub(crate) fn hash64(seed: u64, domain: &str, text: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain.as_bytes());
    h.update([0]);
    h.update(text.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

fn raw_embedding(seed: u64, modality: Modality, input: &str, dim: usize) -> Vec<f64> {
    let toks = tokens(input);
    let mut acc = vec![0.0f64; dim];
    let mut add = |token: &[u8]| {
        let mut rng = ChaCha8Rng::from_seed(token_seed(seed, modality, token));
        for a in acc.iter_mut() {
            *a += rng.gen_range(-1.0..1.0);
        }
    };
    if toks.is_empty() {
        // Token-free inputs still need a stable, input-specific direction.
        let mut raw = vec![0u8];
        raw.extend_from_slice(input.as_bytes());
        add(&raw);
    } else {
        for t in &toks {
            add(t.as_bytes());
        }
    }
    acc
}

/// Unit-norm hashed embedding of `input`.
pub fn stub_embedding(seed: u64, modality: Modality, input: &str, dim: usize) -> EmbeddingVector {
    let mut v = raw_embedding(seed, modality, input, dim.max(1));
    let mut norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        v[0] = 1.0;
        norm = 1.0;
    }
    EmbeddingVector::new(v.into_iter().map(|x| x / norm).collect())
        .expect("hashed embedding is finite and non-empty")
}

/// Rerank scores in [-1, 1]: cosine between hashed text embeddings of the
/// query (plus image locator tokens, when given) and each passage.
pub fn stub_rerank_scores(seed: u64, request: &RerankRequest) -> Vec<f64> {
    let query = match &request.image_ref {
        Some(img) => format!("{} {}", request.query, img),
        None => request.query.clone(),
    };
    let q = raw_embedding(seed, Modality::Text, &query, STUB_RERANK_DIM);
    request
        .passages
        .iter()
        .map(|p| {
            let v = raw_embedding(seed, Modality::Text, p, STUB_RERANK_DIM);
            cosine_slices(&q, &v).unwrap_or(0.0)
        })
        .collect()
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> &'a str {
    let Some(s) = text.find(start) else {
        return "";
    };
    let rest = &text[s + start.len()..];
    match rest.find(end) {
        Some(e) => &rest[..e],
        None => rest,
    }
}

fn first_words(text: &str, n: usize) -> String {
    text.split_whitespace().take(n).collect::<Vec<_>>().join(" ")
}

/// Default chat behavior per template, used when no scenario overrides it.
pub fn default_chat_response(seed: u64, request: &ChatRequest) -> String {
    let user = request.user_text();
    match request.template_id {
        Some(TemplateId::Refiner) => {
            let query = between(user, "Here's the user query: ", "\nAssistant:");
            format!(
                "<think>The image and the question point to one specific entity.</think><answer>{}</answer>",
                serde_json::json!({ "query": query })
            )
        }
        Some(TemplateId::Inspector) => {
            let question = between(user, "Question: ", "\nRetrieved Context: ");
            let context = between(user, "\nRetrieved Context: ", "\u{0}");
            let ctx_tokens: std::collections::BTreeSet<String> =
                tokens(context).into_iter().collect();
            let content: Vec<String> = tokens(question)
                .into_iter()
                .filter(|t| t.chars().count() >= 4)
                .collect();
            let overlap = content.iter().filter(|t| ctx_tokens.contains(*t)).count();
            if !content.is_empty() && overlap * 2 >= content.len() {
                serde_json::json!({ "pass": "true" }).to_string()
            } else {
                let guess = content.last().cloned().unwrap_or_else(|| "unknown".into());
                serde_json::json!({ "pass": "false", "answer": guess }).to_string()
            }
        }
        Some(TemplateId::GeneratorEvqa) | Some(TemplateId::GeneratorInfoseek) => {
            let context = between(user, "Context: ", "\nQuestion: ");
            let sentence = context.split('.').next().unwrap_or("");
            first_words(sentence, 16)
        }
        Some(TemplateId::Summarizer) => {
            first_words(between(user, "\nContent: ", "\nProvide a concise summary:"), 48)
        }
        Some(TemplateId::AnswerExpansion) => {
            let answer = between(user, "Original Answer: ", "\u{0}");
            serde_json::json!({ "expanded_answer": format!("The answer is {answer}.") })
                .to_string()
        }
        Some(TemplateId::CaptionExpansion) => {
            let query = between(user, "Here's the user query: ", "\u{0}");
            serde_json::json!({ "caption": "an image relevant to the question", "query": query })
                .to_string()
        }
        None => format!("stub response {:016x}", hash64(seed, "chat", user)),
    }
}

/// In-process deterministic gateway.
#[derive(Debug, Clone)]
pub struct StubGateway {
    pub seed: u64,
    pub d_vis: usize,
    pub d_text: usize,
    pub scenarios: ScenarioTable,
}

impl StubGateway {
    pub fn new(seed: u64, d_vis: usize, d_text: usize) -> Self {
        Self {
            seed,
            d_vis,
            d_text,
            scenarios: ScenarioTable::default(),
        }
    }

    pub fn with_scenarios(mut self, scenarios: ScenarioTable) -> Self {
        self.scenarios = scenarios;
        self
    }

    pub fn with_response(mut self, template: TemplateId, response: impl Into<String>) -> Self {
        self.scenarios.responses.insert(template, response.into());
        self
    }
}

pub(crate) fn stub_chat(seed: u64, scenarios: &ScenarioTable, request: &ChatRequest) -> String {
    request
        .template_id
        .and_then(|t| scenarios.responses.get(&t).cloned())
        .unwrap_or_else(|| default_chat_response(seed, request))
}

impl ModelGateway for StubGateway {
    fn chat(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        Ok(stub_chat(self.seed, &self.scenarios, request))
    }

    fn embed_text(&self, text: &str) -> Result<EmbeddingVector, GatewayError> {
        Ok(stub_embedding(self.seed, Modality::Text, text, self.d_text))
    }

    fn embed_image(&self, image_ref: &str) -> Result<EmbeddingVector, GatewayError> {
        Ok(stub_embedding(self.seed, Modality::Image, image_ref, self.d_vis))
    }

    fn rerank(&self, request: &RerankRequest) -> Result<Vec<f64>, GatewayError> {
        Ok(stub_rerank_scores(self.seed, request))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::cosine_similarity;
    use crate::gateway::prompts::render_with;

    #[test]
    fn embeddings_are_deterministic_and_unit() {
        let g = StubGateway::new(7, 64, 64);
        let a = g.embed_text("abc").unwrap();
        let b = g.embed_text("abc").unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-12);
        assert_eq!(a.dim(), 64);
        assert_eq!(g.embed_image("img/x.jpg").unwrap().dim(), 64);
    }

    #[test]
    fn distinct_inputs_distinct_vectors() {
        let g = StubGateway::new(7, 64, 64);
        let a = g.embed_text("abc").unwrap();
        let b = g.embed_text("abd").unwrap();
        assert_ne!(a, b);
        assert!(cosine_similarity(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn seed_changes_embeddings() {
        let a = StubGateway::new(1, 8, 8).embed_text("abc").unwrap();
        let b = StubGateway::new(2, 8, 8).embed_text("abc").unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn shared_tokens_are_closer() {
        let g = StubGateway::new(3, 8, 128);
        let q = g.embed_text("eiffel tower height").unwrap();
        let near = g.embed_text("The Eiffel Tower is 330 metres tall").unwrap();
        let far = g.embed_text("The blue whale is a marine mammal").unwrap();
        assert!(cosine_similarity(&q, &near).unwrap() > cosine_similarity(&q, &far).unwrap());
    }

    #[test]
    fn empty_text_embeds() {
        let g = StubGateway::new(3, 8, 8);
        let e = g.embed_text("").unwrap();
        assert!((e.norm() - 1.0).abs() < 1e-12);
        assert_ne!(e, g.embed_text("!!").unwrap());
    }

    #[test]
    fn refiner_default_is_well_formed_echo() {
        let g = StubGateway::new(0, 4, 4);
        let req = ChatRequest::from_prompt(
            render_with(TemplateId::Refiner, &[("Query", "what is \"this\" bird")]).unwrap(),
            Some("img.jpg"),
        );
        let out = g.chat(&req).unwrap();
        assert!(out.starts_with("<think>"));
        assert!(out.contains(r#"{"query":"what is \"this\" bird"}"#));
    }

    #[test]
    fn scenario_overrides_default() {
        let g = StubGateway::new(0, 4, 4).with_response(TemplateId::Summarizer, "stub-summary");
        let req = ChatRequest::from_prompt(
            render_with(
                TemplateId::Summarizer,
                &[("title", "t"), ("section_title", "s"), ("section_text", "x y z")],
            )
            .unwrap(),
            None,
        );
        assert_eq!(g.chat(&req).unwrap(), "stub-summary");
    }

    #[test]
    fn rerank_scores_bounded_and_ordered() {
        let g = StubGateway::new(0, 4, 4);
        let scores = g
            .rerank(&RerankRequest {
                query: "nuthatch lifespan".into(),
                image_ref: None,
                passages: vec![
                    "The nuthatch lifespan is two years".into(),
                    "Volcanoes erupt lava".into(),
                ],
            })
            .unwrap();
        assert_eq!(scores.len(), 2);
        assert!(scores.iter().all(|s| (-1.0..=1.0).contains(s)));
        assert!(scores[0] > scores[1]);
    }
}
