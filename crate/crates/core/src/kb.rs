//! Knowledge-base construction from raw article sections.
//!
//! Each input section becomes exactly one [`KbEntry`]. The section text used
//! for the textual embedding depends on [`classify_section`]: short or
//! boilerplate sections are replaced by the article abstract, very long ones
//! are summarized through the gateway, everything else passes through.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fusion::{build_kb_vector, FusionConfig, FusionError};
use crate::gateway::{render_with, ChatRequest, GatewayError, ModelGateway, TemplateId};
use crate::index::{EntryMeta, KbEntry};

#[derive(Debug, Error)]
pub enum KbError {
    #[error("invalid kb build config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawSection {
    pub article_id: String,
    pub article_title: String,
    pub article_abstract: String,
    pub section_id: String,
    pub section_title: String,
    pub text: String,
    pub image_ref: String,
    pub entity_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KbBuildConfig {
    pub summary_threshold_tokens: usize,
    pub low_info_min_tokens: usize,
    pub blocklist_titles: BTreeSet<String>,
}

impl Default for KbBuildConfig {
    fn default() -> Self {
        Self {
            summary_threshold_tokens: 512,
            low_info_min_tokens: 30,
            blocklist_titles: [
                "references",
                "external links",
                "see also",
                "bibliography",
                "notes",
            ]
            .into_iter()
            .map(String::from)
            .collect(),
        }
    }
}

impl KbBuildConfig {
    pub fn validate(&self) -> Result<(), KbError> {
        if self.summary_threshold_tokens == 0 {
            return Err(KbError::InvalidConfig(
                "summary_threshold_tokens must be >= 1".into(),
            ));
        }
        if self.summary_threshold_tokens <= self.low_info_min_tokens {
            return Err(KbError::InvalidConfig(format!(
                "summary_threshold_tokens ({}) must exceed low_info_min_tokens ({})",
                self.summary_threshold_tokens, self.low_info_min_tokens
            )));
        }
        Ok(())
    }

    fn is_blocklisted(&self, title: &str) -> bool {
        let title = title.trim().to_lowercase();
        self.blocklist_titles
            .iter()
            .any(|b| b.trim().to_lowercase() == title)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SectionClass {
    Passthrough,
    Summarize,
    SubstituteAbstract,
}

/// Whitespace-delimited token count.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn classify_section(section: &RawSection, cfg: &KbBuildConfig) -> SectionClass {
    let n = token_count(&section.text);
    if n < cfg.low_info_min_tokens || cfg.is_blocklisted(&section.section_title) {
        SectionClass::SubstituteAbstract
    } else if n > cfg.summary_threshold_tokens {
        SectionClass::Summarize
    } else {
        SectionClass::Passthrough
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticKind {
    MalformedLine,
    InvalidSection,
    GatewayFailure,
    EncodingFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbDiagnostic {
    /// 1-based input line.
    pub line: usize,
    pub kind: DiagnosticKind,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct KbBuildOutput {
    pub entries: Vec<KbEntry>,
    pub diagnostics: Vec<KbDiagnostic>,
}

struct Prepared {
    line: usize,
    section: RawSection,
}

fn parse_sections<R: BufRead>(
    input: R,
    diagnostics: &mut Vec<KbDiagnostic>,
) -> Result<Vec<Prepared>, KbError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RawSection>(&line) {
            Ok(section)
                if section.article_id.trim().is_empty() || section.section_id.trim().is_empty() =>
            {
                diagnostics.push(KbDiagnostic {
                    line: line_no,
                    kind: DiagnosticKind::InvalidSection,
                    message: "article_id and section_id must be non-empty".into(),
                });
            }
            Ok(section) => out.push(Prepared {
                line: line_no,
                section,
            }),
            Err(e) => diagnostics.push(KbDiagnostic {
                line: line_no,
                kind: DiagnosticKind::MalformedLine,
                message: e.to_string(),
            }),
        }
    }
    out.sort_by(|a, b| {
        (&a.section.article_id, &a.section.section_id, a.line).cmp(&(
            &b.section.article_id,
            &b.section.section_id,
            b.line,
        ))
    });
    Ok(out)
}

/// Text that will represent the section in the index.
pub fn resolve_section_text(
    section: &RawSection,
    class: SectionClass,
    gateway: &dyn ModelGateway,
) -> Result<String, GatewayError> {
    match class {
        SectionClass::Passthrough => Ok(section.text.clone()),
        SectionClass::SubstituteAbstract => Ok(section.article_abstract.clone()),
        SectionClass::Summarize => {
            let prompt = render_with(
                TemplateId::Summarizer,
                &[
                    ("title", &section.article_title),
                    ("section_title", &section.section_title),
                    ("section_text", &section.text),
                ],
            )?;
            let summary = gateway.chat(&ChatRequest::from_prompt(prompt, None))?;
            Ok(summary.trim().to_string())
        }
    }
}

fn encode(
    p: &Prepared,
    cfg: &KbBuildConfig,
    gateway: &dyn ModelGateway,
    fusion: &FusionConfig,
) -> Result<(String, crate::fusion::EmbeddingVector), KbDiagnostic> {
    let gateway_failure = |e: GatewayError| KbDiagnostic {
        line: p.line,
        kind: DiagnosticKind::GatewayFailure,
        message: e.to_string(),
    };
    let class = classify_section(&p.section, cfg);
    let text = resolve_section_text(&p.section, class, gateway).map_err(gateway_failure)?;
    let img = gateway
        .embed_image(&p.section.image_ref)
        .map_err(gateway_failure)?;
    let txt = gateway.embed_text(&text).map_err(gateway_failure)?;
    let vector = build_kb_vector(&img, &txt, fusion).map_err(|e| KbDiagnostic {
        line: p.line,
        kind: DiagnosticKind::EncodingFailure,
        message: e.to_string(),
    })?;
    Ok((text, vector))
}

/// Builds KB entries from a JSONL stream of [`RawSection`]s.
///
/// Malformed lines and sections whose gateway calls fail are reported in
/// [`KbBuildOutput::diagnostics`] and skipped. Entries come out sorted by
/// `(article_id, section_id)` with `entry_id`s assigned densely in that order.
pub fn build_kb<R: BufRead>(
    input: R,
    cfg: &KbBuildConfig,
    gateway: &dyn ModelGateway,
    fusion: &FusionConfig,
) -> Result<KbBuildOutput, KbError> {
    build_kb_parallel(input, cfg, gateway, fusion, 1)
}

/// [`build_kb`] with up to `workers` sections encoded concurrently. The result
/// does not depend on `workers`.
pub fn build_kb_parallel<R: BufRead>(
    input: R,
    cfg: &KbBuildConfig,
    gateway: &dyn ModelGateway,
    fusion: &FusionConfig,
    workers: usize,
) -> Result<KbBuildOutput, KbError> {
    cfg.validate()?;
    fusion.validate()?;
    let mut diagnostics = Vec::new();
    let prepared = parse_sections(input, &mut diagnostics)?;

    let workers = workers.clamp(1, prepared.len().max(1));
    let results: Vec<_> = if workers == 1 {
        prepared
            .iter()
            .map(|p| encode(p, cfg, gateway, fusion))
            .collect()
    } else {
        let chunk = prepared.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = prepared
                .chunks(chunk)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|p| encode(p, cfg, gateway, fusion))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("kb worker panicked"))
                .collect()
        })
    };

    let mut entries = Vec::with_capacity(prepared.len());
    for (p, result) in prepared.into_iter().zip(results) {
        match result {
            Ok((section_text, vector)) => entries.push(KbEntry {
                entry_id: entries.len() as u64,
                entity_id: p.section.entity_id,
                article_id: p.section.article_id,
                section_id: p.section.section_id,
                vector,
                section_text,
                image_ref: p.section.image_ref,
            }),
            Err(d) => {
                warn!("line {}: skipped ({:?}): {}", d.line, d.kind, d.message);
                diagnostics.push(d);
            }
        }
    }
    diagnostics.sort_by_key(|d| d.line);
    Ok(KbBuildOutput {
        entries,
        diagnostics,
    })
}

impl From<&KbEntry> for EntryMeta {
    fn from(e: &KbEntry) -> Self {
        EntryMeta {
            entry_id: e.entry_id,
            entity_id: e.entity_id.clone(),
            article_id: e.article_id.clone(),
            section_id: e.section_id.clone(),
            section_text: e.section_text.clone(),
            image_ref: e.image_ref.clone(),
        }
    }
}

/// Sidecar metadata file: one [`EntryMeta`] JSON object per line.
pub fn write_metadata_jsonl<'a, W: Write>(
    entries: impl IntoIterator<Item = &'a EntryMeta>,
    mut out: W,
) -> std::io::Result<()> {
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{GatewayError, RerankRequest, StubGateway};
    use crate::fusion::EmbeddingVector;

    fn section(id: &str, title: &str, words: usize) -> RawSection {
        RawSection {
            article_id: "A1".into(),
            article_title: "Nuthatch".into(),
            article_abstract: "The nuthatch is a small passerine bird.".into(),
            section_id: id.into(),
            section_title: title.into(),
            text: vec!["word"; words].join(" "),
            image_ref: format!("img/{id}.jpg"),
            entity_id: "Q1".into(),
        }
    }

    #[test]
    fn classification_rules() {
        let cfg = KbBuildConfig::default();
        assert_eq!(
            classify_section(&section("s", "References", 100), &cfg),
            SectionClass::SubstituteAbstract
        );
        assert_eq!(
            classify_section(&section("s", "  see ALSO ", 100), &cfg),
            SectionClass::SubstituteAbstract
        );
        assert_eq!(
            classify_section(&section("s", "Habitat", 800), &cfg),
            SectionClass::Summarize
        );
        assert_eq!(
            classify_section(&section("s", "Habitat", 100), &cfg),
            SectionClass::Passthrough
        );
        assert_eq!(
            classify_section(&section("s", "Habitat", 29), &cfg),
            SectionClass::SubstituteAbstract
        );
        // boundaries: exactly at each threshold is inside the passthrough band
        assert_eq!(
            classify_section(&section("s", "Habitat", 30), &cfg),
            SectionClass::Passthrough
        );
        assert_eq!(
            classify_section(&section("s", "Habitat", 512), &cfg),
            SectionClass::Passthrough
        );
    }

    #[test]
    fn config_validation() {
        let cfg = KbBuildConfig {
            summary_threshold_tokens: 30,
            low_info_min_tokens: 30,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn jsonl(sections: &[RawSection]) -> String {
        sections
            .iter()
            .map(|s| serde_json::to_string(s).unwrap())
            .collect::<Vec<_>>()
            .join("\n")
    }

    fn fusion() -> FusionConfig {
        FusionConfig {
            alpha: 0.5,
            d_vis: 8,
            d_text: 8,
            per_modality_normalize: true,
        }
    }

    #[test]
    fn routes_each_class() {
        let gw = StubGateway::new(1, 8, 8).with_response(TemplateId::Summarizer, "stub-summary");
        let input = jsonl(&[
            section("s1", "Habitat", 100),
            section("s2", "Range", 800),
            section("s3", "References", 5),
        ]);
        let out = build_kb(input.as_bytes(), &KbBuildConfig::default(), &gw, &fusion()).unwrap();
        assert!(out.diagnostics.is_empty());
        let texts: Vec<&str> = out.entries.iter().map(|e| e.section_text.as_str()).collect();
        assert_eq!(
            texts,
            vec![
                vec!["word"; 100].join(" ").as_str(),
                "stub-summary",
                "The nuthatch is a small passerine bird."
            ]
        );
        assert!(out.entries.iter().all(|e| e.vector.dim() == 16));
        assert_eq!(
            out.entries.iter().map(|e| e.entry_id).collect::<Vec<_>>(),
            vec![0, 1, 2]
        );
    }

    #[test]
    fn empty_input() {
        let gw = StubGateway::new(1, 8, 8);
        let out = build_kb(&b""[..], &KbBuildConfig::default(), &gw, &fusion()).unwrap();
        assert!(out.entries.is_empty());
        assert!(out.diagnostics.is_empty());
    }

    #[test]
    fn malformed_line_is_isolated() {
        let gw = StubGateway::new(1, 8, 8);
        let good: Vec<String> = (0..4)
            .map(|i| serde_json::to_string(&section(&format!("s{i}"), "Habitat", 50)).unwrap())
            .collect();
        let input = format!(
            "{}\n{{not json\n{}\n{}\n{}\n",
            good[0], good[1], good[2], good[3]
        );
        let out = build_kb(input.as_bytes(), &KbBuildConfig::default(), &gw, &fusion()).unwrap();
        assert_eq!(out.entries.len(), 4);
        assert_eq!(out.diagnostics.len(), 1);
        assert_eq!(out.diagnostics[0].line, 2);
        assert_eq!(out.diagnostics[0].kind, DiagnosticKind::MalformedLine);
    }

    #[test]
    fn output_sorted_regardless_of_input_order() {
        let gw = StubGateway::new(1, 8, 8);
        let mut a = section("s2", "Habitat", 50);
        a.article_id = "B".into();
        let b = section("s9", "Habitat", 50);
        let c = section("s1", "Habitat", 50);
        let out = build_kb(
            jsonl(&[a, b, c]).as_bytes(),
            &KbBuildConfig::default(),
            &gw,
            &fusion(),
        )
        .unwrap();
        let keys: Vec<(String, String)> = out
            .entries
            .iter()
            .map(|e| (e.article_id.clone(), e.section_id.clone()))
            .collect();
        assert_eq!(
            keys,
            vec![
                ("A1".into(), "s1".into()),
                ("A1".into(), "s9".into()),
                ("B".into(), "s2".into())
            ]
        );
    }

    struct FlakyImages(StubGateway);

    impl ModelGateway for FlakyImages {
        fn chat(&self, r: &ChatRequest) -> Result<String, GatewayError> {
            self.0.chat(r)
        }
        fn embed_text(&self, t: &str) -> Result<EmbeddingVector, GatewayError> {
            self.0.embed_text(t)
        }
        fn embed_image(&self, i: &str) -> Result<EmbeddingVector, GatewayError> {
            if i.contains("bad") {
                Err(GatewayError::Timeout { attempts: 4 })
            } else {
                self.0.embed_image(i)
            }
        }
        fn rerank(&self, r: &RerankRequest) -> Result<Vec<f64>, GatewayError> {
            self.0.rerank(r)
        }
    }

    #[test]
    fn gateway_failures_skip_entries() {
        let gw = FlakyImages(StubGateway::new(1, 8, 8));
        let mut bad = section("s2", "Habitat", 50);
        bad.image_ref = "img/bad.jpg".into();
        let input = jsonl(&[section("s1", "Habitat", 50), bad, section("s3", "Habitat", 50)]);
        let out = build_kb(input.as_bytes(), &KbBuildConfig::default(), &gw, &fusion()).unwrap();
        assert_eq!(out.entries.len(), 2);
        assert_eq!(out.diagnostics.len(), 1);
        assert_eq!(out.diagnostics[0].kind, DiagnosticKind::GatewayFailure);
        assert_eq!(out.diagnostics[0].line, 2);
    }

    #[test]
    fn parallel_matches_sequential() {
        let gw = StubGateway::new(4, 8, 8);
        let sections: Vec<RawSection> = (0..23)
            .map(|i| section(&format!("s{i:02}"), "Habitat", 40 + i))
            .collect();
        let input = jsonl(&sections);
        let seq = build_kb(input.as_bytes(), &KbBuildConfig::default(), &gw, &fusion()).unwrap();
        let par = build_kb_parallel(
            input.as_bytes(),
            &KbBuildConfig::default(),
            &gw,
            &fusion(),
            4,
        )
        .unwrap();
        assert_eq!(seq.entries, par.entries);
    }
}
