//! Two-stage rerank fusion.
//!
//! Stage 1 fuses the retrieval similarity of each top-k candidate with a
//! multi-modal reranker score. Stage 2 takes the winning section's article,
//! reranks all of its sections textually and fuses that with the stage-1
//! score. Both stages min-max normalize each score list per query first.

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{GatewayError, ModelGateway, RerankRequest};
use crate::index::{EntryMeta, ScoredCandidate};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RerankError {
    #[error("score lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no candidates to rerank")]
    NoCandidates,
    #[error("weight {name} = {value} is outside [0, 1]")]
    InvalidWeight { name: &'static str, value: f64 },
    #[error("candidate entry {0} has no metadata")]
    UnknownEntry(u64),
    #[error("article sections do not include the top-1 section {0}")]
    MissingTopSection(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionWeights {
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            beta1: 0.6,
            beta2: 0.2,
        }
    }
}

impl FusionWeights {
    pub fn validate(&self) -> Result<(), RerankError> {
        for (name, value) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(RerankError::InvalidWeight { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankedContext {
    pub entry_id: u64,
    pub article_id: String,
    pub section_text: String,
    pub stage1_score: f64,
    pub stage2_score: f64,
}

/// `(s - min) / (max - min)`; a constant list maps to all 0.5.
pub fn minmax_normalize(scores: &[f64]) -> Vec<f64> {
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| {
            (lo.min(s), hi.max(s))
        });
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.5; scores.len()];
    }
    scores.iter().map(|s| (s - lo) / span).collect()
}

/// `beta * retrieval + (1 - beta) * rerank`, elementwise.
pub fn fuse(retrieval: &[f64], rerank: &[f64], beta: f64) -> Result<Vec<f64>, RerankError> {
    if retrieval.len() != rerank.len() {
        return Err(RerankError::LengthMismatch(retrieval.len(), rerank.len()));
    }
    Ok(retrieval
        .iter()
        .zip(rerank)
        .map(|(r, x)| beta * r + (1.0 - beta) * x)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Output {
    /// Candidates re-scored with the fused score, best first.
    pub ranked: Vec<ScoredCandidate>,
    pub rerank_scores: Vec<f64>,
    /// Set when the reranker failed and retrieval order was kept.
    pub degraded: bool,
    pub diagnostic: Option<String>,
}

impl Stage1Output {
    pub fn top1(&self) -> &ScoredCandidate {
        &self.ranked[0]
    }
}

fn sort_desc(ranked: &mut [ScoredCandidate]) {
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.entry_id.cmp(&b.entry_id))
    });
}

/// Multi-modal rerank of retrieval candidates, fused with `beta1`.
///
/// `lookup` resolves an entry id to its section metadata. On gateway failure
/// the retrieval ordering is returned with `degraded` set.
pub fn stage1_rerank<'a>(
    query: &str,
    image_ref: Option<&str>,
    candidates: &[ScoredCandidate],
    lookup: impl Fn(u64) -> Option<&'a EntryMeta>,
    gateway: &dyn ModelGateway,
    weights: &FusionWeights,
) -> Result<Stage1Output, RerankError> {
    if candidates.is_empty() {
        return Err(RerankError::NoCandidates);
    }
    weights.validate()?;
    let passages = candidates
        .iter()
        .map(|c| {
            lookup(c.entry_id)
                .map(|m| m.section_text.clone())
                .ok_or(RerankError::UnknownEntry(c.entry_id))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let request = RerankRequest {
        query: query.to_string(),
        image_ref: image_ref.map(str::to_string),
        passages,
    };
    let retrieval: Vec<f64> = candidates.iter().map(|c| c.score).collect();
    match checked_rerank(gateway, &request) {
        Ok(rerank_scores) => {
            let fused = fuse(
                &minmax_normalize(&retrieval),
                &minmax_normalize(&rerank_scores),
                weights.beta1,
            )?;
            let mut ranked: Vec<ScoredCandidate> = candidates
                .iter()
                .zip(fused)
                .map(|(c, score)| ScoredCandidate {
                    entry_id: c.entry_id,
                    score,
                })
                .collect();
            sort_desc(&mut ranked);
            Ok(Stage1Output {
                ranked,
                rerank_scores,
                degraded: false,
                diagnostic: None,
            })
        }
        Err(e) => {
            warn!("stage-1 rerank failed, keeping retrieval order: {e}");
            let mut ranked = candidates.to_vec();
            sort_desc(&mut ranked);
            Ok(Stage1Output {
                ranked,
                rerank_scores: Vec::new(),
                degraded: true,
                diagnostic: Some(e.to_string()),
            })
        }
    }
}

fn checked_rerank(
    gateway: &dyn ModelGateway,
    request: &RerankRequest,
) -> Result<Vec<f64>, GatewayError> {
    let scores = gateway.rerank(request)?;
    if scores.len() != request.passages.len() {
        return Err(GatewayError::MalformedResponse(format!(
            "{} rerank scores for {} passages",
            scores.len(),
            request.passages.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(GatewayError::MalformedResponse(
            "non-finite rerank score".into(),
        ));
    }
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Output {
    pub context: RerankedContext,
    pub degraded: bool,
    pub diagnostic: Option<String>,
}

/// Text rerank over every section of the stage-1 winner's article, fused
/// with `beta2`. The stage-1 score is credited to the winning section only;
/// other sections start from 0 before normalization.
pub fn stage2_article_rerank(
    query: &str,
    top1: &ScoredCandidate,
    article_sections: &[&EntryMeta],
    gateway: &dyn ModelGateway,
    weights: &FusionWeights,
) -> Result<Stage2Output, RerankError> {
    weights.validate()?;
    let top_pos = article_sections
        .iter()
        .position(|m| m.entry_id == top1.entry_id)
        .ok_or(RerankError::MissingTopSection(top1.entry_id))?;
    let context_for = |i: usize, stage2_score: f64| {
        let m = article_sections[i];
        RerankedContext {
            entry_id: m.entry_id,
            article_id: m.article_id.clone(),
            section_text: m.section_text.clone(),
            stage1_score: if i == top_pos { top1.score } else { 0.0 },
            stage2_score,
        }
    };
    if article_sections.len() == 1 {
        return Ok(Stage2Output {
            context: context_for(0, top1.score),
            degraded: false,
            diagnostic: None,
        });
    }
    let request = RerankRequest {
        query: query.to_string(),
        image_ref: None,
        passages: article_sections
            .iter()
            .map(|m| m.section_text.clone())
            .collect(),
    };
    match checked_rerank(gateway, &request) {
        Ok(text_scores) => {
            let stage1: Vec<f64> = (0..article_sections.len())
                .map(|i| if i == top_pos { top1.score } else { 0.0 })
                .collect();
            let fused = fuse(
                &minmax_normalize(&stage1),
                &minmax_normalize(&text_scores),
                weights.beta2,
            )?;
            let best = (0..fused.len())
                .max_by(|&a, &b| {
                    fused[a].total_cmp(&fused[b]).then_with(|| {
                        article_sections[b]
                            .entry_id
                            .cmp(&article_sections[a].entry_id)
                    })
                })
                .expect("article has sections");
            Ok(Stage2Output {
                context: context_for(best, fused[best]),
                degraded: false,
                diagnostic: None,
            })
        }
        Err(e) => {
            warn!("stage-2 rerank failed, keeping stage-1 section: {e}");
            Ok(Stage2Output {
                context: context_for(top_pos, top1.score),
                degraded: true,
                diagnostic: Some(e.to_string()),
            })
        }
    }
}
