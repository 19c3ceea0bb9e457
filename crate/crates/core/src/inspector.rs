//! Inspector verdicts and decoupled answer routing.
//!
//! The inspector reads the question and the reranked context and either
//! passes it (`{"pass": "true"}`) or fails it with its own answer. Passing
//! contexts go to a text generator; failing ones return the inspector's
//! internal answer. Unparseable verdicts fall back to the raw inspector text.

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::metrics::{answers_match, MatchMode};
use crate::gateway::{render_with, ChatRequest, ModelGateway, TemplateId};
use crate::rerank::RerankedContext;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InspectorError {
    #[error("predicted and gold sequences differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no routing decisions to score")]
    Empty,
    #[error("record has neither a gold section nor a gold entity with answers")]
    Unlabelable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Decision {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InspectionResult {
    pub decision: Decision,
    pub internal_answer: Option<String>,
    pub parse_ok: bool,
    pub raw_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Route {
    Generator,
    Internal,
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub answer: String,
    pub route: Route,
    pub question: String,
    pub context_entry_id: u64,
    /// Set on the FALLBACK route.
    #[serde(default)]
    pub flagged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

fn truthy(v: &serde_json::Value) -> Option<bool> {
    match v {
        serde_json::Value::Bool(b) => Some(*b),
        serde_json::Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        },
        _ => None,
    }
}

/// First JSON object embedded anywhere in `text`.
fn first_json_object(text: &str) -> Option<serde_json::Map<String, serde_json::Value>> {
    for (start, _) in text.match_indices('{') {
        let mut stream =
            serde_json::Deserializer::from_str(&text[start..]).into_iter::<serde_json::Value>();
        if let Some(Ok(serde_json::Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}

/// Total over arbitrary input; failures are reported through `parse_ok`.
pub fn parse_inspection(text: &str) -> InspectionResult {
    let malformed = || InspectionResult {
        decision: Decision::Fail,
        internal_answer: None,
        parse_ok: false,
        raw_text: text.to_string(),
    };
    let Some(obj) = first_json_object(text) else {
        return malformed();
    };
    let Some(pass) = obj.get("pass").and_then(truthy) else {
        return malformed();
    };
    let answer = match obj.get("answer") {
        Some(serde_json::Value::String(s)) if !s.trim().is_empty() => Some(s.trim().to_string()),
        Some(serde_json::Value::Number(n)) => Some(n.to_string()),
        _ => None,
    };
    if pass {
        InspectionResult {
            decision: Decision::Pass,
            internal_answer: answer,
            parse_ok: true,
            raw_text: text.to_string(),
        }
    } else if answer.is_some() {
        InspectionResult {
            decision: Decision::Fail,
            internal_answer: answer,
            parse_ok: true,
            raw_text: text.to_string(),
        }
    } else {
        // A FAIL verdict without an answer leaves nothing to route to.
        malformed()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    Evqa,
    Infoseek,
}

impl Dataset {
    pub fn generator_template(self) -> TemplateId {
        match self {
            Dataset::Evqa => TemplateId::GeneratorEvqa,
            Dataset::Infoseek => TemplateId::GeneratorInfoseek,
        }
    }
}

/// Runs the inspector over `(question, context)` and routes the answer.
///
/// Gateway or prompt failures never abort: a failed inspector call or a
/// failed generator call on the PASS path both produce a flagged FALLBACK.
pub fn decide_and_route(
    image_ref: Option<&str>,
    question: &str,
    context: &RerankedContext,
    dataset: Dataset,
    inspector: &dyn ModelGateway,
    generator: &dyn ModelGateway,
) -> (InspectionResult, AnswerRecord) {
    let record = |answer: String, route: Route, diagnostic: Option<String>| AnswerRecord {
        answer,
        route,
        question: question.to_string(),
        context_entry_id: context.entry_id,
        flagged: route == Route::Fallback,
        diagnostic,
    };
    let inspection = render_with(
        TemplateId::Inspector,
        &[("Query", question), ("Context", &context.section_text)],
    )
    .map_err(|e| e.to_string())
    .and_then(|p| {
        inspector
            .chat(&ChatRequest::from_prompt(p, image_ref))
            .map_err(|e| e.to_string())
    });
    let inspection = match inspection {
        Ok(text) => parse_inspection(&text),
        Err(e) => {
            warn!("inspector call failed: {e}");
            let result = InspectionResult {
                decision: Decision::Fail,
                internal_answer: None,
                parse_ok: false,
                raw_text: String::new(),
            };
            let diag = format!("inspector failure: {e}");
            return (result, record(String::new(), Route::Fallback, Some(diag)));
        }
    };
    let answer = match (inspection.decision, inspection.parse_ok) {
        (Decision::Pass, _) => {
            let generated = render_with(
                dataset.generator_template(),
                &[("Context", &context.section_text), ("Question", question)],
            )
            .map_err(|e| e.to_string())
            .and_then(|p| {
                generator
                    .chat(&ChatRequest::from_prompt(p, None))
                    .map_err(|e| e.to_string())
            });
            match generated {
                Ok(a) => record(a.trim().to_string(), Route::Generator, None),
                Err(e) => {
                    warn!("generator call failed: {e}");
                    record(
                        inspection.raw_text.clone(),
                        Route::Fallback,
                        Some(format!("generator failure: {e}")),
                    )
                }
            }
        }
        (Decision::Fail, true) => record(
            inspection.internal_answer.clone().unwrap_or_default(),
            Route::Internal,
            None,
        ),
        (Decision::Fail, false) => record(
            inspection.raw_text.clone(),
            Route::Fallback,
            Some("unparseable inspector verdict".into()),
        ),
    };
    (inspection, answer)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub accuracy: f64,
}

impl RoutingConfusion {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let total = tp + fp + fn_ + tn;
        let accuracy = if total == 0 {
            0.0
        } else {
            (tp + tn) as f64 / total as f64
        };
        Self {
            tp,
            fp,
            fn_,
            tn,
            accuracy,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn routing_confusion(
    predicted: &[Decision],
    gold: &[Decision],
) -> Result<RoutingConfusion, InspectorError> {
    if predicted.len() != gold.len() {
        return Err(InspectorError::LengthMismatch(predicted.len(), gold.len()));
    }
    if predicted.is_empty() {
        return Err(InspectorError::Empty);
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (p, g) in predicted.iter().zip(gold) {
        match (p, g) {
            (Decision::Pass, Decision::Pass) => tp += 1,
            (Decision::Pass, Decision::Fail) => fp += 1,
            (Decision::Fail, Decision::Pass) => fn_ += 1,
            (Decision::Fail, Decision::Fail) => tn += 1,
        }
    }
    Ok(RoutingConfusion::from_counts(tp, fp, fn_, tn))
}

/// What is known about one training question when deriving its label.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelInput {
    pub gold_section_id: Option<String>,
    pub gold_entity: Option<String>,
    #[serde(default)]
    pub gold_answers: Vec<String>,
    pub top1_section_id: Option<String>,
    /// Entities among the retrieved candidates.
    #[serde(default)]
    pub retrieved_entities: Vec<String>,
    /// The generator's zero-shot answer over the retrieved context.
    pub generator_answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InspectorLabel {
    pub decision: Decision,
    /// Supervision target on FAIL: the gold answer.
    pub target_answer: Option<String>,
}

/// Section-labelled records pass iff the top-1 section is the gold one.
/// Entity-labelled records pass iff the gold entity was retrieved and the
/// generator's answer matches a gold answer under relaxed accuracy.
pub fn label_inspector_sample(input: &LabelInput) -> Result<InspectorLabel, InspectorError> {
    let pass = if let Some(gold) = &input.gold_section_id {
        input.top1_section_id.as_deref() == Some(gold.as_str())
    } else if let (Some(entity), false) = (&input.gold_entity, input.gold_answers.is_empty()) {
        let hit = input.retrieved_entities.iter().any(|e| e == entity);
        let correct = input.generator_answer.as_deref().is_some_and(|a| {
            input
                .gold_answers
                .iter()
                .any(|g| answers_match(a, g, MatchMode::Relaxed))
        });
        hit && correct
    } else {
        return Err(InspectorError::Unlabelable);
    };
    Ok(if pass {
        InspectorLabel {
            decision: Decision::Pass,
            target_answer: None,
        }
    } else {
        InspectorLabel {
            decision: Decision::Fail,
            target_answer: input.gold_answers.first().cloned(),
        }
    })
}

/// Rewrites a short answer as a full sentence via the answer-expansion prompt.
pub fn expand_answer(
    question: &str,
    answer: &str,
    gateway: &dyn ModelGateway,
) -> Result<String, crate::gateway::GatewayError> {
    let prompt = render_with(
        TemplateId::AnswerExpansion,
        &[("question", question), ("original_answer", answer)],
    )?;
    let raw = gateway.chat(&ChatRequest::from_prompt(prompt, None))?;
    Ok(first_json_object(&raw)
        .and_then(|m| {
            m.get("expanded_answer")
                .and_then(|v| v.as_str())
                .map(str::to_string)
        })
        .unwrap_or_else(|| raw.trim().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{GatewayError, StubGateway};
    use proptest::prelude::*;

    fn ctx() -> RerankedContext {
        RerankedContext {
            entry_id: 17,
            article_id: "a".into(),
            section_text: "The observatory opened in 1785.".into(),
            stage1_score: 0.9,
            stage2_score: 0.8,
        }
    }

    #[test]
    fn parse_examples() {
        let r = parse_inspection(r#"{"pass": "true"}"#);
        assert_eq!(r.decision, Decision::Pass);
        assert!(r.parse_ok);
        let r = parse_inspection(r#"{"pass": "false", "answer": "Paris"}"#);
        assert_eq!(r.decision, Decision::Fail);
        assert_eq!(r.internal_answer.as_deref(), Some("Paris"));
        assert!(r.parse_ok);
        let r = parse_inspection("I think the context is fine.");
        assert!(!r.parse_ok);
        assert_eq!(r.decision, Decision::Fail);
    }

    #[test]
    fn parse_variants() {
        assert_eq!(parse_inspection(r#"{"pass": true}"#).decision, Decision::Pass);
        assert_eq!(parse_inspection(r#"{"pass": "TRUE"}"#).decision, Decision::Pass);
        let chatty = "Sure! Here you go:\n```json\n{\"pass\": \"False\", \"answer\": \"blue whale\", \"why\": 1}\n```";
        let r = parse_inspection(chatty);
        assert!(r.parse_ok);
        assert_eq!(r.internal_answer.as_deref(), Some("blue whale"));
        assert!(!parse_inspection(r#"{"pass": "maybe"}"#).parse_ok);
        assert!(!parse_inspection(r#"{"pass": "false"}"#).parse_ok);
        assert!(!parse_inspection("{broken").parse_ok);
        // the first object wins even if a later one is valid
        assert!(!parse_inspection(r#"{"x": 1} {"pass": true}"#).parse_ok);
    }

    #[test]
    fn routes_three_cases() {
        let gen = StubGateway::new(0, 4, 4).with_response(TemplateId::GeneratorEvqa, "1785");
        let pass = StubGateway::new(0, 4, 4).with_response(TemplateId::Inspector, r#"{"pass": "true"}"#);
        let (_, r) = decide_and_route(Some("i.jpg"), "When did it open?", &ctx(), Dataset::Evqa, &pass, &gen);
        assert_eq!((r.answer.as_str(), r.route), ("1785", Route::Generator));
        assert_eq!(r.context_entry_id, 17);

        let fail = StubGateway::new(0, 4, 4)
            .with_response(TemplateId::Inspector, r#"{"pass": "false", "answer": "blue whale"}"#);
        let (_, r) = decide_and_route(None, "What animal?", &ctx(), Dataset::Evqa, &fail, &gen);
        assert_eq!((r.answer.as_str(), r.route), ("blue whale", Route::Internal));

        let prose = StubGateway::new(0, 4, 4).with_response(TemplateId::Inspector, "no idea");
        let (_, r) = decide_and_route(None, "What?", &ctx(), Dataset::Evqa, &prose, &gen);
        assert_eq!(r.route, Route::Fallback);
        assert!(r.flagged);
        assert_eq!(r.answer, "no idea");
    }

    struct Broken;
    impl ModelGateway for Broken {
        fn chat(&self, _: &ChatRequest) -> Result<String, GatewayError> {
            Err(GatewayError::Timeout { attempts: 1 })
        }
        fn embed_text(&self, _: &str) -> Result<crate::fusion::EmbeddingVector, GatewayError> {
            unimplemented!()
        }
        fn embed_image(&self, _: &str) -> Result<crate::fusion::EmbeddingVector, GatewayError> {
            unimplemented!()
        }
        fn rerank(&self, _: &crate::gateway::RerankRequest) -> Result<Vec<f64>, GatewayError> {
            unimplemented!()
        }
    }

    #[test]
    fn generator_failure_falls_back() {
        let pass = StubGateway::new(0, 4, 4).with_response(TemplateId::Inspector, r#"{"pass": "true"}"#);
        let (i, r) = decide_and_route(None, "q", &ctx(), Dataset::Infoseek, &pass, &Broken);
        assert_eq!(i.decision, Decision::Pass);
        assert_eq!(r.route, Route::Fallback);
        assert!(r.diagnostic.unwrap().contains("generator"));
        let (_, r) = decide_and_route(None, "q", &ctx(), Dataset::Infoseek, &Broken, &Broken);
        assert_eq!(r.route, Route::Fallback);
    }

    #[test]
    fn confusion_from_cell_counts() {
        let c = RoutingConfusion::from_counts(1274, 264, 586, 2626);
        assert_eq!(c.total(), 4750);
        assert!((c.accuracy - 0.8211).abs() < 5e-5);
        let p = [Decision::Pass];
        let g = [Decision::Fail];
        let c = routing_confusion(&p, &g).unwrap();
        assert_eq!((c.fp, c.accuracy), (1, 0.0));
        let c = routing_confusion(&[Decision::Pass, Decision::Fail], &[Decision::Pass, Decision::Fail]).unwrap();
        assert_eq!(c.accuracy, 1.0);
        assert_eq!(routing_confusion(&[], &[]), Err(InspectorError::Empty));
        assert!(routing_confusion(&p, &[]).is_err());
    }

    #[test]
    fn labels() {
        let evqa = LabelInput {
            gold_section_id: Some("s1".into()),
            top1_section_id: Some("s1".into()),
            gold_answers: vec!["x".into()],
            ..Default::default()
        };
        assert_eq!(label_inspector_sample(&evqa).unwrap().decision, Decision::Pass);
        let infoseek = LabelInput {
            gold_entity: Some("Q1".into()),
            gold_answers: vec!["Gustave Eiffel".into()],
            retrieved_entities: vec!["Q5".into(), "Q1".into()],
            generator_answer: Some("Napoleon".into()),
            ..Default::default()
        };
        let l = label_inspector_sample(&infoseek).unwrap();
        assert_eq!(l.decision, Decision::Fail);
        assert_eq!(l.target_answer.as_deref(), Some("Gustave Eiffel"));
        let ok = LabelInput {
            generator_answer: Some("gustave eiffel".into()),
            ..infoseek
        };
        assert_eq!(label_inspector_sample(&ok).unwrap().decision, Decision::Pass);
        assert_eq!(
            label_inspector_sample(&LabelInput::default()),
            Err(InspectorError::Unlabelable)
        );
    }

    #[test]
    fn expansion_uses_template() {
        let gw = StubGateway::new(0, 4, 4);
        assert_eq!(expand_answer("q", "Paris", &gw).unwrap(), "The answer is Paris.");
    }

    proptest! {
        #[test]
        fn parse_is_total(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
            let text = String::from_utf8_lossy(&bytes);
            let r = parse_inspection(&text);
            if r.decision == Decision::Fail && r.parse_ok {
                prop_assert!(r.internal_answer.is_some());
            }
        }
    }
}
