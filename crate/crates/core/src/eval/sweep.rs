//! Grid sweeps over the query-side hyperparameters.
//!
//! The index is built once; each grid point re-encodes queries with its
//! `alpha`, retrieves `k` candidates, reranks with its `beta1`/`beta2` and
//! routes answers, then reports one CSV row.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{
    pseudo_recall_at_k, recall_at_k, vqa_accuracy, EvalRecord, MatchMode,
};
use super::EvalError;
use crate::config::PipelineConfig;
use crate::fusion::FusionConfig;
use crate::pipeline::{
    map_ordered, CandidateRecord, Pipeline, PipelineError, QueryEmbeddings, QueryRecord,
};
use crate::rerank::FusionWeights;

pub const SWEEP_METRIC_COLUMNS: [&str; 8] = [
    "R@1", "R@5", "R@10", "R@20", "PR@5", "PR@20", "vqa_std", "vqa_relaxed",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeSpec {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ValueItem {
    Value(f64),
    Range(RangeSpec),
}

/// A list of values and/or inclusive ranges, or a single range. Lists allow
/// a coarse range plus a finer sub-range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ValueSpec {
    // List goes first: a 3-element array would otherwise parse as a range.
    List(Vec<ValueItem>),
    Range(RangeSpec),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub alpha: Option<ValueSpec>,
    pub beta1: Option<ValueSpec>,
    pub beta2: Option<ValueSpec>,
    pub k: Option<ValueSpec>,
}

/// Values are rounded to 1e-9 so float steps print cleanly.
fn round9(x: f64) -> f64 {
    (x * 1e9).round() / 1e9
}

fn expand_range(name: &str, r: &RangeSpec) -> Result<Vec<f64>, EvalError> {
    if !(r.step > 0.0) || !r.start.is_finite() || !r.stop.is_finite() || r.stop < r.start {
        return Err(EvalError::InvalidParameter(format!(
            "{name}: range needs finite start <= stop and step > 0"
        )));
    }
    let n = ((r.stop - r.start) / r.step + 1e-9).floor() as usize + 1;
    if n > 100_000 {
        return Err(EvalError::InvalidParameter(format!(
            "{name}: range expands to {n} values"
        )));
    }
    Ok((0..n).map(|i| round9(r.start + i as f64 * r.step)).collect())
}

fn expand(name: &str, spec: &ValueSpec) -> Result<Vec<f64>, EvalError> {
    let mut values = Vec::new();
    match spec {
        ValueSpec::Range(r) => values.extend(expand_range(name, r)?),
        ValueSpec::List(items) => {
            for item in items {
                match item {
                    ValueItem::Value(v) => values.push(round9(*v)),
                    ValueItem::Range(r) => values.extend(expand_range(name, r)?),
                }
            }
        }
    }
    values.sort_by(f64::total_cmp);
    values.dedup();
    Ok(values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub k: usize,
}

impl SweepGrid {
    /// Parameter names present in the grid, in canonical order.
    pub fn params(&self) -> Vec<&'static str> {
        [
            ("alpha", &self.alpha),
            ("beta1", &self.beta1),
            ("beta2", &self.beta2),
            ("k", &self.k),
        ]
        .into_iter()
        .filter(|(_, v)| v.is_some())
        .map(|(n, _)| n)
        .collect()
    }

    /// Cartesian product in canonical parameter order; parameters absent
    /// from the grid take their value from `base`.
    pub fn points(&self, base: &PipelineConfig) -> Result<Vec<SweepPoint>, EvalError> {
        let axis = |name: &str, spec: &Option<ValueSpec>, default: f64, unit: bool| {
            let values = match spec {
                Some(s) => expand(name, s)?,
                None => return Ok(vec![default]),
            };
            if values.is_empty() {
                return Err(EvalError::EmptyGrid);
            }
            for &v in &values {
                let ok = if unit {
                    (0.0..=1.0).contains(&v)
                } else {
                    v >= 1.0 && v.fract() == 0.0
                };
                if !ok {
                    let want = if unit { "in [0, 1]" } else { "a positive integer" };
                    return Err(EvalError::InvalidParameter(format!("{name} = {v} must be {want}")));
                }
            }
            Ok(values)
        };
        if self.params().is_empty() {
            return Err(EvalError::EmptyGrid);
        }
        let alphas = axis("alpha", &self.alpha, base.fusion.alpha, true)?;
        let beta1s = axis("beta1", &self.beta1, base.weights.beta1, true)?;
        let beta2s = axis("beta2", &self.beta2, base.weights.beta2, true)?;
        let ks = axis("k", &self.k, base.retrieval_k as f64, false)?;
        let mut out = Vec::new();
        for &alpha in &alphas {
            for &beta1 in &beta1s {
                for &beta2 in &beta2s {
                    for &k in &ks {
                        out.push(SweepPoint {
                            alpha,
                            beta1,
                            beta2,
                            k: k as usize,
                        });
                    }
                }
            }
        }
        Ok(out)
    }
}

pub fn parse_grid(json: &str) -> Result<SweepGrid, EvalError> {
    serde_json::from_str(json).map_err(|e| EvalError::InvalidParameter(format!("grid: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: SweepPoint,
    /// Values for [`SWEEP_METRIC_COLUMNS`], in order.
    pub metrics: Vec<f64>,
}

struct PreparedQuery {
    record: QueryRecord,
    refined_query: String,
    refine_ok: bool,
    embeddings: QueryEmbeddings,
}

fn row_metrics(records: &[EvalRecord]) -> Result<Vec<f64>, EvalError> {
    Ok(vec![
        recall_at_k(records, 1)?,
        recall_at_k(records, 5)?,
        recall_at_k(records, 10)?,
        recall_at_k(records, 20)?,
        pseudo_recall_at_k(records, 5)?,
        pseudo_recall_at_k(records, 20)?,
        vqa_accuracy(records, MatchMode::Standard),
        vqa_accuracy(records, MatchMode::Relaxed),
    ])
}

/// Evaluates every grid point over `queries` with one shared index.
pub fn sweep(
    grid: &SweepGrid,
    pipeline: &Pipeline<'_>,
    queries: &[QueryRecord],
) -> Result<Vec<SweepRow>, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let points = grid.points(pipeline.cfg)?;
    let fail = |e: PipelineError| EvalError::Pipeline(e.to_string());
    let workers = pipeline.cfg.workers;

    // Refinement and embeddings do not depend on any swept parameter.
    let prepared = map_ordered(queries, workers, |q| -> Result<_, PipelineError> {
        let (refined_query, refine_ok) = if pipeline.cfg.refine_queries {
            pipeline.refine(q)?
        } else {
            (q.question.clone(), false)
        };
        let embeddings = pipeline.embed_query(&refined_query, &q.image_ref)?;
        Ok(PreparedQuery {
            record: q.clone(),
            refined_query,
            refine_ok,
            embeddings,
        })
    })
    .map_err(fail)?;

    let mut rows = Vec::with_capacity(points.len());
    for point in points {
        let fusion = FusionConfig {
            alpha: point.alpha,
            ..pipeline.cfg.fusion.clone()
        };
        let weights = FusionWeights {
            beta1: point.beta1,
            beta2: point.beta2,
        };
        let records = map_ordered(&prepared, workers, |p| -> Result<_, PipelineError> {
            let candidates = pipeline.search(&p.embeddings, &fusion, point.k)?;
            let cand = CandidateRecord {
                query: p.record.clone(),
                refined_query: p.refined_query.clone(),
                refine_ok: p.refine_ok,
                candidates,
                retrieval_ms: None,
            };
            let reranked = pipeline.rerank_with(&cand, &weights)?;
            Ok(pipeline.answer(&reranked).eval)
        })
        .map_err(fail)?;
        rows.push(SweepRow {
            point,
            metrics: row_metrics(&records)?,
        });
    }
    Ok(rows)
}

/// CSV with the grid's parameters followed by [`SWEEP_METRIC_COLUMNS`].
pub fn sweep_csv(grid: &SweepGrid, rows: &[SweepRow]) -> String {
    let params = grid.params();
    let mut out = params
        .iter()
        .copied()
        .chain(SWEEP_METRIC_COLUMNS)
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for row in rows {
        let values: BTreeMap<&str, String> = [
            ("alpha", row.point.alpha.to_string()),
            ("beta1", row.point.beta1.to_string()),
            ("beta2", row.point.beta2.to_string()),
            ("k", row.point.k.to_string()),
        ]
        .into_iter()
        .collect();
        let cells: Vec<String> = params
            .iter()
            .map(|p| values[p].clone())
            .chain(row.metrics.iter().map(|m| format!("{m:.6}")))
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_expansion() {
        let g = parse_grid(r#"{"alpha": [0, 0.5, 1]}"#).unwrap();
        let pts = g.points(&PipelineConfig::default()).unwrap();
        assert_eq!(pts.len(), 3);
        assert_eq!(pts[2].alpha, 1.0);
        assert_eq!(pts[0].beta1, 0.6);

        let g = parse_grid(
            r#"{"alpha": [{"start": 0, "stop": 1, "step": 0.25}, {"start": 0.5, "stop": 0.6, "step": 0.05}], "k": [5, 20]}"#,
        )
        .unwrap();
        let pts = g.points(&PipelineConfig::default()).unwrap();
        let alphas: Vec<f64> = pts.iter().step_by(2).map(|p| p.alpha).collect();
        assert_eq!(alphas, vec![0.0, 0.25, 0.5, 0.55, 0.6, 0.75, 1.0]);
        assert_eq!(g.params(), vec!["alpha", "k"]);

        let g = parse_grid(r#"{"beta1": {"start": 0.1, "stop": 0.3, "step": 0.1}}"#).unwrap();
        let b: Vec<f64> = g.points(&PipelineConfig::default()).unwrap().iter().map(|p| p.beta1).collect();
        assert_eq!(b, vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn grid_errors() {
        let base = PipelineConfig::default();
        assert_eq!(parse_grid("{}").unwrap().points(&base), Err(EvalError::EmptyGrid));
        assert_eq!(
            parse_grid(r#"{"alpha": []}"#).unwrap().points(&base),
            Err(EvalError::EmptyGrid)
        );
        assert!(parse_grid(r#"{"alpha": [1.5]}"#).unwrap().points(&base).is_err());
        assert!(parse_grid(r#"{"k": [0]}"#).unwrap().points(&base).is_err());
        assert!(parse_grid(r#"{"k": [2.5]}"#).unwrap().points(&base).is_err());
        assert!(parse_grid(r#"{"gamma": [1]}"#).is_err());
        assert!(parse_grid(r#"{"alpha": {"start": 1, "stop": 0, "step": 0.1}}"#)
            .unwrap()
            .points(&base)
            .is_err());
    }
}
