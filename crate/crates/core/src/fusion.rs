//! Multi-modal vector fusion.
//!
//! Knowledge-base vectors are the plain concatenation of a visual block and a
//! textual block. Query vectors scale the visual block by `alpha` and the
//! textual block by `1 - alpha` before concatenating, so `alpha` trades off
//! how much each modality contributes to the cosine score.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero-norm {0} vector")]
    ZeroNorm(&'static str),
    #[error("vector must have at least one component")]
    Empty,
    #[error("vector contains a non-finite component at position {0}")]
    NonFinite(usize),
    #[error("invalid fusion config: {0}")]
    InvalidConfig(String),
}

/// A dense real-valued embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, FusionError> {
        if values.is_empty() {
            return Err(FusionError::Empty);
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(FusionError::NonFinite(pos));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    /// Returns a unit-length copy.
    pub fn normalized(&self) -> Result<Self, FusionError> {
        let n = self.norm();
        if n == 0.0 {
            return Err(FusionError::ZeroNorm("input"));
        }
        Ok(Self {
            values: self.values.iter().map(|v| v / n).collect(),
        })
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = FusionError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.values
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub alpha: f64,
    pub d_vis: usize,
    pub d_text: usize,
    pub per_modality_normalize: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.59,
            d_vis: 64,
            d_text: 64,
            per_modality_normalize: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(FusionError::InvalidConfig(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if self.d_vis == 0 || self.d_text == 0 {
            return Err(FusionError::InvalidConfig(
                "d_vis and d_text must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn fused_dim(&self) -> usize {
        self.d_vis + self.d_text
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        Self {
            alpha,
            ..self.clone()
        }
    }
}

fn l2_norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn prepare_block(
    emb: &EmbeddingVector,
    expected: usize,
    normalize: bool,
    label: &'static str,
) -> Result<Vec<f64>, FusionError> {
    if emb.dim() != expected {
        return Err(FusionError::DimensionMismatch {
            expected,
            actual: emb.dim(),
        });
    }
    if normalize {
        let n = emb.norm();
        if n == 0.0 {
            return Err(FusionError::ZeroNorm(label));
        }
        Ok(emb.values.iter().map(|v| v / n).collect())
    } else {
        Ok(emb.values.clone())
    }
}

fn concat_weighted(
    img: &EmbeddingVector,
    txt: &EmbeddingVector,
    cfg: &FusionConfig,
    vis_weight: f64,
    text_weight: f64,
) -> Result<EmbeddingVector, FusionError> {
    cfg.validate()?;
    let vis = prepare_block(img, cfg.d_vis, cfg.per_modality_normalize, "visual")?;
    let text = prepare_block(txt, cfg.d_text, cfg.per_modality_normalize, "textual")?;
    let mut values = Vec::with_capacity(cfg.fused_dim());
    values.extend(vis.iter().map(|v| v * vis_weight));
    values.extend(text.iter().map(|v| v * text_weight));
    Ok(EmbeddingVector { values })
}

/// Index-side vector: unweighted concatenation of the visual and textual blocks.
pub fn build_kb_vector(
    img_emb: &EmbeddingVector,
    txt_emb: &EmbeddingVector,
    cfg: &FusionConfig,
) -> Result<EmbeddingVector, FusionError> {
    concat_weighted(img_emb, txt_emb, cfg, 1.0, 1.0)
}

/// Query-side vector: `concat(alpha * visual, (1 - alpha) * textual)`.
///
/// Normalization (when enabled) happens per block before weighting.
pub fn build_query_vector(
    img_emb: &EmbeddingVector,
    txt_emb: &EmbeddingVector,
    cfg: &FusionConfig,
) -> Result<EmbeddingVector, FusionError> {
    concat_weighted(img_emb, txt_emb, cfg, cfg.alpha, 1.0 - cfg.alpha)
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, FusionError> {
    cosine_slices(a.values(), b.values())
}

pub(crate) fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64, FusionError> {
    if a.len() != b.len() {
        return Err(FusionError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(FusionError::ZeroNorm("similarity operand"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
