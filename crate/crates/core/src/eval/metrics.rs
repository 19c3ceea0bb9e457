//! Retrieval and answer metrics over [`EvalRecord`]s.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::inspector::{routing_confusion, Decision, Route, RoutingConfusion};

/// One retrieved section, with enough metadata to score it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedItem {
    pub entry_id: u64,
    pub score: f64,
    #[serde(default)]
    pub entity_id: String,
    #[serde(default)]
    pub section_id: String,
    #[serde(default)]
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub retrieval_ms: f64,
    pub inference_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    pub question: String,
    pub gold_answers: Vec<String>,
    #[serde(default)]
    pub gold_entity: Option<String>,
    #[serde(default)]
    pub gold_section_id: Option<String>,
    /// Best first.
    #[serde(default)]
    pub retrieved: Vec<RetrievedItem>,
    #[serde(default)]
    pub predicted_answer: Option<String>,
    #[serde(default)]
    pub route: Option<Route>,
    /// Section handed to the inspector, when it differs from `retrieved[0]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_section_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<StageTiming>,
}

fn check_k(k: usize) -> Result<(), EvalError> {
    if k == 0 {
        Err(EvalError::InvalidK)
    } else {
        Ok(())
    }
}

fn gold_in_top_k(record: &EvalRecord, k: usize) -> Option<bool> {
    let top = record.retrieved.iter().take(k);
    if let Some(entity) = &record.gold_entity {
        Some(top.into_iter().any(|r| &r.entity_id == entity))
    } else {
        record
            .gold_section_id
            .as_ref()
            .map(|s| top.into_iter().any(|r| &r.section_id == s))
    }
}

/// Fraction of records whose gold entity (or, lacking one, gold section)
/// appears among the first `k` retrieved items.
pub fn recall_at_k(records: &[EvalRecord], k: usize) -> Result<f64, EvalError> {
    check_k(k)?;
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (i, r) in records.iter().enumerate() {
        match gold_in_top_k(r, k) {
            Some(true) => hits += 1,
            Some(false) => {}
            None => return Err(EvalError::MissingGold(i)),
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

fn squash(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Fraction of records where some top-`k` passage contains some gold answer,
/// compared case-insensitively with whitespace runs collapsed.
pub fn pseudo_recall_at_k(records: &[EvalRecord], k: usize) -> Result<f64, EvalError> {
    check_k(k)?;
    if records.is_empty() {
        return Ok(0.0);
    }
    let hits = records
        .iter()
        .filter(|r| {
            let golds: Vec<String> = r
                .gold_answers
                .iter()
                .map(|g| squash(g))
                .filter(|g| !g.is_empty())
                .collect();
            r.retrieved.iter().take(k).any(|item| {
                let text = squash(&item.text);
                golds.iter().any(|g| text.contains(g.as_str()))
            })
        })
        .count();
    Ok(hits as f64 / records.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Standard,
    Relaxed,
}

/// Lowercase, drop punctuation and the articles a/an/the, collapse spaces.
/// Digit-group commas ("1,000") are removed rather than split.
pub fn normalize_answer(text: &str) -> String {
    let chars: Vec<char> = text.trim().to_lowercase().chars().collect();
    let mut cleaned = String::with_capacity(chars.len());
    for (i, &c) in chars.iter().enumerate() {
        if c.is_alphanumeric() || c.is_whitespace() {
            cleaned.push(c);
        } else if c == '.' || c == ',' {
            let digit_before = i > 0 && chars[i - 1].is_ascii_digit();
            let digit_after = chars.get(i + 1).is_some_and(|d| d.is_ascii_digit());
            match (c, digit_before && digit_after) {
                (',', true) => {}
                ('.', true) => cleaned.push('.'),
                _ => cleaned.push(' '),
            }
        } else {
            cleaned.push(' ');
        }
    }
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Relative tolerance for numeric answers under relaxed matching.
pub const RELAXED_TOLERANCE: f64 = 0.10;

fn as_number(normalized: &str) -> Option<f64> {
    normalized.parse::<f64>().ok().filter(|x| x.is_finite())
}

/// Year or numeric range such as "1850-1900", "1850 – 1900" or "1850 to 1900".
fn as_range(text: &str) -> Option<(f64, f64)> {
    let lower = text.trim().to_lowercase();
    for sep in [" to ", "\u{2013}", "\u{2014}", "-"] {
        if let Some((a, b)) = lower.split_once(sep) {
            let a = as_number(&normalize_answer(a))?;
            let b = as_number(&normalize_answer(b))?;
            return Some((a.min(b), a.max(b)));
        }
    }
    None
}

fn numbers_close(pred: f64, gold: f64) -> bool {
    if gold == 0.0 {
        pred == 0.0
    } else {
        (pred - gold).abs() <= RELAXED_TOLERANCE * gold.abs() + 1e-12
    }
}

pub fn answers_match(pred: &str, gold: &str, mode: MatchMode) -> bool {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    if !g.is_empty() && p == g {
        return true;
    }
    if mode == MatchMode::Standard {
        return false;
    }
    if let Some((lo, hi)) = as_range(gold) {
        if let Some(x) = as_number(&p) {
            return lo <= x && x <= hi;
        }
        if let Some((plo, phi)) = as_range(pred) {
            return lo <= plo && phi <= hi;
        }
        return false;
    }
    match (as_number(&p), as_number(&g)) {
        (Some(x), Some(y)) => numbers_close(x, y),
        _ => false,
    }
}

/// Share of records whose prediction matches any gold answer. Records
/// without a prediction count as wrong.
pub fn vqa_accuracy(records: &[EvalRecord], mode: MatchMode) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits = records
        .iter()
        .filter(|r| {
            r.predicted_answer.as_deref().is_some_and(|p| {
                r.gold_answers.iter().any(|g| answers_match(p, g, mode))
            })
        })
        .count();
    hits as f64 / records.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub timed_records: usize,
    pub mean_retrieval_ms: f64,
    pub mean_inference_ms: f64,
}

pub fn latency_report(records: &[EvalRecord]) -> Result<LatencyReport, EvalError> {
    let timed: Vec<StageTiming> = records.iter().filter_map(|r| r.timing).collect();
    if timed.is_empty() {
        return Err(EvalError::NoTimings);
    }
    let n = timed.len() as f64;
    Ok(LatencyReport {
        timed_records: timed.len(),
        mean_retrieval_ms: timed.iter().map(|t| t.retrieval_ms).sum::<f64>() / n,
        mean_inference_ms: timed.iter().map(|t| t.inference_ms).sum::<f64>() / n,
    })
}

/// Inspector routing against section-level ground truth: a query should
/// pass when the section it was answered from (the top-1 retrieved one if
/// not recorded) is the gold one. Records without a route or gold section
/// are skipped.
pub fn routing_from_records(records: &[EvalRecord]) -> Option<RoutingConfusion> {
    let (pred, gold): (Vec<Decision>, Vec<Decision>) = records
        .iter()
        .filter_map(|r| {
            let route = r.route?;
            let gold_section = r.gold_section_id.as_ref()?;
            let top1 = r
                .context_section_id
                .as_ref()
                .or_else(|| r.retrieved.first().map(|c| &c.section_id));
            let pred = if route == Route::Generator {
                Decision::Pass
            } else {
                Decision::Fail
            };
            let gold = if top1 == Some(gold_section) {
                Decision::Pass
            } else {
                Decision::Fail
            };
            Some((pred, gold))
        })
        .unzip();
    routing_confusion(&pred, &gold).ok()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_records: usize,
    pub recall_at: BTreeMap<usize, f64>,
    pub pseudo_recall_at: BTreeMap<usize, f64>,
    pub vqa_standard: f64,
    pub vqa_relaxed: f64,
    pub routing: Option<RoutingConfusion>,
    pub route_counts: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyReport>,
}

pub fn evaluate(records: &[EvalRecord], ks: &[usize]) -> Result<MetricsReport, EvalError> {
    let mut recall_at = BTreeMap::new();
    let mut pseudo_recall_at = BTreeMap::new();
    for &k in ks {
        recall_at.insert(k, recall_at_k(records, k)?);
        pseudo_recall_at.insert(k, pseudo_recall_at_k(records, k)?);
    }
    let mut route_counts = BTreeMap::new();
    for r in records {
        if let Some(route) = r.route {
            let key = serde_json::to_value(route)
                .ok()
                .and_then(|v| v.as_str().map(str::to_string))
                .unwrap_or_default();
            *route_counts.entry(key).or_insert(0) += 1;
        }
    }
    Ok(MetricsReport {
        num_records: records.len(),
        recall_at,
        pseudo_recall_at,
        vqa_standard: vqa_accuracy(records, MatchMode::Standard),
        vqa_relaxed: vqa_accuracy(records, MatchMode::Relaxed),
        routing: routing_from_records(records),
        route_counts,
        latency: latency_report(records).ok(),
    })
}

/// Flat `metric,value` CSV of a report.
pub fn report_csv(report: &MetricsReport) -> String {
    let mut out = String::from("metric,value\n");
    out.push_str(&format!("num_records,{}\n", report.num_records));
    for (k, v) in &report.recall_at {
        out.push_str(&format!("R@{k},{v}\n"));
    }
    for (k, v) in &report.pseudo_recall_at {
        out.push_str(&format!("PR@{k},{v}\n"));
    }
    out.push_str(&format!("vqa_std,{}\n", report.vqa_standard));
    out.push_str(&format!("vqa_relaxed,{}\n", report.vqa_relaxed));
    if let Some(r) = &report.routing {
        out.push_str(&format!("routing_accuracy,{}\n", r.accuracy));
    }
    if let Some(l) = &report.latency {
        out.push_str(&format!("mean_retrieval_ms,{}\n", l.mean_retrieval_ms));
        out.push_str(&format!("mean_inference_ms,{}\n", l.mean_inference_ms));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn item(entity: &str, text: &str) -> RetrievedItem {
        RetrievedItem {
            entry_id: 0,
            score: 0.0,
            entity_id: entity.into(),
            section_id: format!("{entity}#0"),
            text: text.into(),
        }
    }

    fn record(gold: &str, rank: Option<usize>) -> EvalRecord {
        let mut retrieved: Vec<RetrievedItem> =
            (0..10).map(|i| item(&format!("other{i}"), "")).collect();
        if let Some(r) = rank {
            retrieved[r - 1] = item(gold, "");
        }
        EvalRecord {
            query_id: None,
            question: "q".into(),
            gold_answers: vec!["x".into()],
            gold_entity: Some(gold.into()),
            gold_section_id: None,
            retrieved,
            predicted_answer: None,
            route: None,
            context_section_id: None,
            timing: None,
        }
    }

    #[test]
    fn recall_examples() {
        let all_first: Vec<_> = (0..5).map(|_| record("g", Some(1))).collect();
        assert_eq!(recall_at_k(&all_first, 1).unwrap(), 1.0);
        let mixed = vec![
            record("g", Some(1)),
            record("g", Some(3)),
            record("g", Some(7)),
            record("g", None),
        ];
        assert_eq!(recall_at_k(&mixed, 5).unwrap(), 0.5);
        assert_eq!(recall_at_k(&mixed, 1).unwrap(), 0.25);
        assert_eq!(recall_at_k(&mixed, 10).unwrap(), 0.75);
        assert_eq!(recall_at_k(&mixed, 0), Err(EvalError::InvalidK));
        let mut no_gold = record("g", Some(1));
        no_gold.gold_entity = None;
        assert_eq!(recall_at_k(&[no_gold], 1), Err(EvalError::MissingGold(0)));
    }

    #[test]
    fn section_level_recall() {
        let mut r = record("g", Some(2));
        r.gold_entity = None;
        r.gold_section_id = Some("g#0".into());
        assert_eq!(recall_at_k(&[r.clone()], 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&[r], 2).unwrap(), 1.0);
    }

    #[test]
    fn pseudo_recall_examples() {
        let mut r = record("g", None);
        r.gold_answers = vec!["1889".into()];
        r.retrieved[1].text = "Completed in\n 1889 for the fair".into();
        assert_eq!(pseudo_recall_at_k(&[r.clone()], 1).unwrap(), 0.0);
        assert_eq!(pseudo_recall_at_k(&[r.clone()], 2).unwrap(), 1.0);
        r.gold_answers = vec!["IN 1889".into()];
        assert_eq!(pseudo_recall_at_k(&[r.clone()], 2).unwrap(), 1.0);
        let empty = record("g", None);
        assert_eq!(pseudo_recall_at_k(&[empty], 10).unwrap(), 0.0);
    }

    #[test]
    fn answer_matching() {
        assert!(answers_match("The Eiffel Tower", "eiffel tower", MatchMode::Standard));
        assert!(answers_match("102", "100", MatchMode::Relaxed));
        assert!(!answers_match("102", "100", MatchMode::Standard));
        assert!(!answers_match("115", "100", MatchMode::Relaxed));
        assert!(answers_match("1,000", "1000", MatchMode::Standard));
        assert!(answers_match("3.5", "3.5", MatchMode::Standard));
        assert!(answers_match("1875", "1850-1900", MatchMode::Relaxed));
        assert!(answers_match("1860 to 1870", "1850 - 1900", MatchMode::Relaxed));
        assert!(!answers_match("1920", "1850-1900", MatchMode::Relaxed));
        assert!(!answers_match("", "", MatchMode::Standard));
        assert!(answers_match("0", "0", MatchMode::Relaxed));
    }

    #[test]
    fn latency_examples() {
        let mut a = record("g", None);
        a.timing = Some(StageTiming {
            retrieval_ms: 1.0,
            inference_ms: 4.0,
        });
        let mut b = a.clone();
        b.timing = Some(StageTiming {
            retrieval_ms: 3.0,
            inference_ms: 6.0,
        });
        let rep = latency_report(&[a.clone(), b]).unwrap();
        assert_eq!(rep.mean_retrieval_ms, 2.0);
        assert_eq!(rep.mean_inference_ms, 5.0);
        assert_eq!(latency_report(&[a]).unwrap().mean_retrieval_ms, 1.0);
        assert_eq!(latency_report(&[]), Err(EvalError::NoTimings));
    }

    #[test]
    fn routing_against_sections() {
        let mut r = record("g", Some(1));
        r.gold_section_id = Some("g#0".into());
        r.route = Some(Route::Generator);
        let mut miss = record("g", Some(3));
        miss.gold_section_id = Some("g#0".into());
        miss.route = Some(Route::Generator);
        let c = routing_from_records(&[r, miss]).unwrap();
        assert_eq!((c.tp, c.fp), (1, 1));
    }

    fn arb_record() -> impl Strategy<Value = EvalRecord> {
        (
            prop::option::of(1usize..=10),
            prop::sample::select(vec!["100", "102", "eiffel tower", "1875", "blue"]),
            prop::sample::select(vec!["100", "The Eiffel Tower", "1850-1900", "Blue!"]),
            prop::collection::vec(prop::sample::select(vec!["", "in 100 years", "blue sky"]), 10),
        )
            .prop_map(|(rank, pred, gold, texts)| {
                let mut r = record("g", rank);
                r.predicted_answer = Some(pred.to_string());
                r.gold_answers = vec![gold.to_string()];
                for (item, t) in r.retrieved.iter_mut().zip(texts) {
                    item.text = t.to_string();
                }
                r
            })
    }

    proptest! {
        #[test]
        fn metric_laws(records in prop::collection::vec(arb_record(), 1..30)) {
            let mut prev = (0.0, 0.0);
            for k in 1..=10 {
                let r = recall_at_k(&records, k).unwrap();
                let p = pseudo_recall_at_k(&records, k).unwrap();
                prop_assert!(r >= prev.0 && p >= prev.1);
                prev = (r, p);
            }
            prop_assert!(vqa_accuracy(&records, MatchMode::Standard) <= vqa_accuracy(&records, MatchMode::Relaxed));
        }

        #[test]
        fn normalize_is_idempotent(s in ".{0,40}") {
            let once = normalize_answer(&s);
            prop_assert_eq!(normalize_answer(&once), once.clone());
        }
    }
}
