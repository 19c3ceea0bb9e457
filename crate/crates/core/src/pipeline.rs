//! End-to-end query flow: refine, retrieve, rerank, inspect and answer.
//!
//! Each stage reads and writes serde records so the CLI can run them as
//! separate JSONL-to-JSONL steps.

use std::io::{BufRead, Write};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::eval::metrics::{EvalRecord, RetrievedItem, StageTiming};
use crate::fusion::{build_query_vector, EmbeddingVector, FusionConfig, FusionError};
use crate::gateway::{render_with, ChatRequest, GatewayError, ModelGateway, TemplateId};
use crate::index::{IndexError, ScoredCandidate, VectorIndex};
use crate::inspector::{decide_and_route, AnswerRecord, InspectionResult};
use crate::refiner::parse_refiner_output;
use crate::rerank::{stage1_rerank, stage2_article_rerank, FusionWeights, RerankError, RerankedContext};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("line {line}: {message}")]
    Json { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Rerank(#[from] RerankError),
    #[error("query {query_id}: {message}")]
    Query { query_id: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub question: String,
    pub image_ref: String,
    #[serde(default)]
    pub gold_answers: Vec<String>,
    #[serde(default)]
    pub gold_entity: Option<String>,
    #[serde(default)]
    pub gold_section_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    #[serde(flatten)]
    pub query: QueryRecord,
    /// Query text actually embedded; the question itself when refinement is
    /// off or its output was malformed.
    pub refined_query: String,
    pub refine_ok: bool,
    pub candidates: Vec<RetrievedItem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankRecord {
    #[serde(flatten)]
    pub candidates: CandidateRecord,
    pub stage1: Vec<ScoredCandidate>,
    pub context: RerankedContext,
    pub context_section_id: String,
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnsweredRecord {
    #[serde(flatten)]
    pub eval: EvalRecord,
    pub context: RerankedContext,
    pub inspection: InspectionResult,
    pub answer: AnswerRecord,
}

/// Visual and textual embeddings of one query, reusable across `alpha`.
#[derive(Debug, Clone)]
pub struct QueryEmbeddings {
    pub visual: EmbeddingVector,
    pub textual: EmbeddingVector,
}

pub struct Pipeline<'a> {
    pub cfg: &'a PipelineConfig,
    pub gateway: &'a dyn ModelGateway,
    pub index: &'a VectorIndex,
    /// Record per-stage wall-clock timings (makes outputs run-dependent).
    pub timings: bool,
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a PipelineConfig, gateway: &'a dyn ModelGateway, index: &'a VectorIndex) -> Self {
        Self {
            cfg,
            gateway,
            index,
            timings: false,
        }
    }

    /// Refined query text and whether the refiner's output was well formed.
    pub fn refine(&self, q: &QueryRecord) -> Result<(String, bool), PipelineError> {
        let prompt = render_with(TemplateId::Refiner, &[("Query", &q.question)])
            .map_err(GatewayError::from)?;
        let raw = self
            .gateway
            .chat(&ChatRequest::from_prompt(prompt, Some(&q.image_ref)))?;
        let parsed = parse_refiner_output(&raw);
        Ok(match parsed.refined_query {
            Some(rq) if parsed.well_formed => (rq, true),
            _ => (q.question.clone(), false),
        })
    }

    pub fn embed_query(&self, text: &str, image_ref: &str) -> Result<QueryEmbeddings, PipelineError> {
        Ok(QueryEmbeddings {
            visual: self.gateway.embed_image(image_ref)?,
            textual: self.gateway.embed_text(text)?,
        })
    }

    pub fn search(
        &self,
        emb: &QueryEmbeddings,
        fusion: &FusionConfig,
        k: usize,
    ) -> Result<Vec<RetrievedItem>, PipelineError> {
        let q = build_query_vector(&emb.visual, &emb.textual, fusion)?;
        let hits = self.index.search_topk(&q, k)?;
        Ok(hits
            .into_iter()
            .map(|c| {
                let meta = self.index.entry(c.entry_id);
                RetrievedItem {
                    entry_id: c.entry_id,
                    score: c.score,
                    entity_id: meta.map(|m| m.entity_id.clone()).unwrap_or_default(),
                    section_id: meta.map(|m| m.section_id.clone()).unwrap_or_default(),
                    text: meta.map(|m| m.section_text.clone()).unwrap_or_default(),
                }
            })
            .collect())
    }

    pub fn retrieve(&self, q: &QueryRecord, k: usize) -> Result<CandidateRecord, PipelineError> {
        let start = Instant::now();
        let (refined_query, refine_ok) = if self.cfg.refine_queries {
            self.refine(q)?
        } else {
            (q.question.clone(), false)
        };
        let emb = self.embed_query(&refined_query, &q.image_ref)?;
        let candidates = self.search(&emb, &self.cfg.fusion, k)?;
        Ok(CandidateRecord {
            query: q.clone(),
            refined_query,
            refine_ok,
            candidates,
            retrieval_ms: self.timings.then(|| ms_since(start)),
        })
    }

    pub fn rerank_with(
        &self,
        c: &CandidateRecord,
        weights: &FusionWeights,
    ) -> Result<RerankRecord, PipelineError> {
        let scored: Vec<ScoredCandidate> = c
            .candidates
            .iter()
            .map(|r| ScoredCandidate {
                entry_id: r.entry_id,
                score: r.score,
            })
            .collect();
        let s1 = stage1_rerank(
            &c.query.question,
            Some(&c.query.image_ref),
            &scored,
            |id| self.index.entry(id),
            self.gateway,
            weights,
        )?;
        let top1 = *s1.top1();
        let article_id = &self
            .index
            .entry(top1.entry_id)
            .ok_or(RerankError::UnknownEntry(top1.entry_id))?
            .article_id;
        let sections = self.index.article_sections(article_id);
        let s2 = stage2_article_rerank(&c.query.question, &top1, &sections, self.gateway, weights)?;
        let context_section_id = self
            .index
            .entry(s2.context.entry_id)
            .map(|m| m.section_id.clone())
            .unwrap_or_default();
        Ok(RerankRecord {
            candidates: c.clone(),
            stage1: s1.ranked,
            context: s2.context,
            context_section_id,
            degraded: s1.degraded || s2.degraded,
            diagnostics: s1.diagnostic.into_iter().chain(s2.diagnostic).collect(),
        })
    }

    pub fn rerank(&self, c: &CandidateRecord) -> Result<RerankRecord, PipelineError> {
        self.rerank_with(c, &self.cfg.weights)
    }

    pub fn answer(&self, r: &RerankRecord) -> AnsweredRecord {
        let start = Instant::now();
        let q = &r.candidates.query;
        let (inspection, answer) = decide_and_route(
            Some(&q.image_ref),
            &q.question,
            &r.context,
            self.cfg.dataset,
            self.gateway,
            self.gateway,
        );
        let timing = match (self.timings, r.candidates.retrieval_ms) {
            (true, Some(retrieval_ms)) => Some(StageTiming {
                retrieval_ms,
                inference_ms: ms_since(start),
            }),
            _ => None,
        };
        AnsweredRecord {
            eval: EvalRecord {
                query_id: Some(q.query_id.clone()),
                question: q.question.clone(),
                gold_answers: q.gold_answers.clone(),
                gold_entity: q.gold_entity.clone(),
                gold_section_id: q.gold_section_id.clone(),
                retrieved: r.candidates.candidates.clone(),
                predicted_answer: Some(answer.answer.clone()),
                route: Some(answer.route),
                context_section_id: Some(r.context_section_id.clone()),
                timing,
            },
            context: r.context.clone(),
            inspection,
            answer,
        }
    }
}

/// Parses one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(input: R) -> Result<Vec<T>, PipelineError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| PipelineError::Json {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(mut out: W, items: &[T]) -> Result<(), PipelineError> {
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| std::io::Error::other(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Applies `f` to every item with up to `workers` threads; output order
/// follows input order.
pub fn map_ordered<T, U, E, F>(items: &[T], workers: usize, f: F) -> Result<Vec<U>, E>
where
    T: Sync,
    U: Send,
    E: Send,
    F: Fn(&T) -> Result<U, E> + Sync,
{
    let workers = workers.clamp(1, items.len().max(1));
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(workers);
    let results: Vec<Vec<Result<U, E>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("pipeline worker panicked"))
            .collect()
    });
    results.into_iter().flatten().collect()
}
