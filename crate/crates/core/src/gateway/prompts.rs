//! Prompt templates for every model role in the pipeline.
//!
//! User texts use `{Name}` placeholders. Substitution is a single pass:
//! values are inserted verbatim and never re-scanned for placeholders.
//!
//! | Template             | Variables                                   |
//! |----------------------|---------------------------------------------|
//! | `refiner`            | `Query`                                     |
//! | `inspector`          | `Query`, `Context`                          |
//! | `generator_evqa`     | `Context`, `Question`                       |
//! | `generator_infoseek` | `Context`, `Question`                       |
//! | `summarizer`         | `title`, `section_title`, `section_text`    |
//! | `answer_expansion`   | `question`, `original_answer`               |
//! | `caption_expansion`  | `query`                                     |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
    #[error("template {template} is missing variable `{name}`")]
    MissingVariable { template: TemplateId, name: String },
    #[error("template {template} has no variable `{name}`")]
    UnknownVariable { template: TemplateId, name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Refiner,
    Inspector,
    GeneratorEvqa,
    GeneratorInfoseek,
    Summarizer,
    AnswerExpansion,
    CaptionExpansion,
}

impl TemplateId {
    pub const ALL: [TemplateId; 7] = [
        TemplateId::Refiner,
        TemplateId::Inspector,
        TemplateId::GeneratorEvqa,
        TemplateId::GeneratorInfoseek,
        TemplateId::Summarizer,
        TemplateId::AnswerExpansion,
        TemplateId::CaptionExpansion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::Refiner => "refiner",
            TemplateId::Inspector => "inspector",
            TemplateId::GeneratorEvqa => "generator_evqa",
            TemplateId::GeneratorInfoseek => "generator_infoseek",
            TemplateId::Summarizer => "summarizer",
            TemplateId::AnswerExpansion => "answer_expansion",
            TemplateId::CaptionExpansion => "caption_expansion",
        }
    }

    pub fn template(self) -> PromptTemplate {
        let (system_text, user_text) = match self {
            TemplateId::Refiner => (REFINER_SYSTEM, REFINER_USER),
            TemplateId::Inspector => (INSPECTOR_SYSTEM, INSPECTOR_USER),
            TemplateId::GeneratorEvqa => (GENERATOR_EVQA_SYSTEM, GENERATOR_EVQA_USER),
            TemplateId::GeneratorInfoseek => (GENERATOR_INFOSEEK_SYSTEM, GENERATOR_INFOSEEK_USER),
            TemplateId::Summarizer => (SUMMARIZER_SYSTEM, SUMMARIZER_USER),
            TemplateId::AnswerExpansion => (ANSWER_EXPANSION_SYSTEM, ANSWER_EXPANSION_USER),
            TemplateId::CaptionExpansion => (CAPTION_EXPANSION_SYSTEM, CAPTION_EXPANSION_USER),
        };
        PromptTemplate {
            template_id: self,
            system_text,
            user_text,
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = PromptError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == norm)
            .ok_or_else(|| PromptError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: TemplateId,
    pub system_text: &'static str,
    pub user_text: &'static str,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub template_id: TemplateId,
    pub system_text: String,
    pub user_text: String,
}

enum Piece<'a> {
    Literal(&'a str),
    Var(&'a str),
}

fn pieces(text: &str) -> Vec<Piece<'_>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        let close = after.find('}');
        let name_ok = |name: &str| {
            !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        };
        match close {
            Some(close) if name_ok(&after[..close]) => {
                out.push(Piece::Literal(&rest[..open]));
                out.push(Piece::Var(&after[..close]));
                rest = &after[close + 1..];
            }
            _ => {
                out.push(Piece::Literal(&rest[..=open]));
                rest = after;
            }
        }
    }
    out.push(Piece::Literal(rest));
    out
}

impl PromptTemplate {
    /// Placeholder names in order of first appearance.
    pub fn variables(&self) -> Vec<&'static str> {
        let mut seen = BTreeSet::new();
        pieces(self.user_text)
            .into_iter()
            .filter_map(|p| match p {
                Piece::Var(name) if seen.insert(name) => Some(name),
                _ => None,
            })
            .collect()
    }

    pub fn render(&self, vars: &BTreeMap<String, String>) -> Result<RenderedPrompt, PromptError> {
        let names = self.variables();
        if let Some(extra) = vars.keys().find(|k| !names.contains(&k.as_str())) {
            return Err(PromptError::UnknownVariable {
                template: self.template_id,
                name: extra.clone(),
            });
        }
        let mut user_text = String::with_capacity(self.user_text.len() + 64);
        for piece in pieces(self.user_text) {
            match piece {
                Piece::Literal(s) => user_text.push_str(s),
                Piece::Var(name) => {
                    let value = vars.get(name).ok_or_else(|| PromptError::MissingVariable {
                        template: self.template_id,
                        name: name.to_string(),
                    })?;
                    user_text.push_str(value);
                }
            }
        }
        Ok(RenderedPrompt {
            template_id: self.template_id,
            system_text: self.system_text.to_string(),
            user_text,
        })
    }
}

pub fn render_prompt(
    template_id: TemplateId,
    vars: &BTreeMap<String, String>,
) -> Result<RenderedPrompt, PromptError> {
    template_id.template().render(vars)
}

/// Convenience for call sites with a handful of literal pairs.
pub fn render_with(
    template_id: TemplateId,
    vars: &[(&str, &str)],
) -> Result<RenderedPrompt, PromptError> {
    let map = vars
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    render_prompt(template_id, &map)
}

pub const REFINER_SYSTEM: &str = "Character Introduction
You are an expert in generating queries for encyclopedic retrieval. You first think about the reasoning process in the mind and then provide the user with the answer. Given a question about the given image <image>, your task is to retain the original query while expanding it with additional relevant information derived from both the visual content and world knowledge, to retrieve documents that best answer the question.

Response Format
Show your work in <think> </think> tags. Your final response must be in JSON format within <answer> </answer> tags. For example,
<answer>
{
    \"query\": \"....\"
}
</answer>.";

pub const REFINER_USER: &str = "Here's the user query: {Query}
Assistant: Let me think step by step. <think>";

pub const INSPECTOR_SYSTEM: &str = "Character Introduction
You are an assistant to determine the consistency and completeness of the provided context in relation to a question and an image <image>. You will receive a question and a retrieved context. Follow these steps:
1. Check if the context is consistent with both the image and the question.
2. Determine if the context contains the answer to the question.
Response Format
If both conditions are satisfied, respond with:
{
    \"pass\": \"true\"
}
If either condition is not satisfied, respond with:
{
    \"pass\": \"false\",
    \"answer\": \"predicted answer\"
}
Be concise and ensure your responses are in JSON format.";

pub const INSPECTOR_USER: &str = "Question: {Query}
Retrieved Context: {Context}";

pub const GENERATOR_EVQA_SYSTEM: &str = "You are a helpful assistant for answering encyclopedic questions.If the context does not contain the information required to answer the question, you should answer the question using internal model knowledge.";

pub const GENERATOR_EVQA_USER: &str = "Context: {Context}
Question: {Question}
The answer is:";

pub const GENERATOR_INFOSEEK_SYSTEM: &str = "You are a helpful assistant for answering encyclopedic questions. Do not answer anything else.If you need to answer questions about numbers or time, please output the corresponding numerical format directly.If the context does not contain the information required to answer the question, you should answer the question using internal model knowledge.";

pub const GENERATOR_INFOSEEK_USER: &str = "Context: {Context}
Question: {Question}
Just answer the questions , no explanations needed. Short answer is:";

pub const SUMMARIZER_SYSTEM: &str =
    "Summarize the following Wikipedia section concisely while preserving key information.";

pub const SUMMARIZER_USER: &str = "Article: {title}
Section: {section_title}
Content: {section_text}
Provide a concise summary:";

pub const ANSWER_EXPANSION_SYSTEM: &str = "Character Introduction
Given a question and its short answer, expand the answer into a complete sentence while keeping the original answer intact. Expand the answer into a natural, complete sentence that includes the original answer.

Response Format
Return your response in JSON format. Output format:
{
    \"expanded_answer\": \"your expanded sentence here\"
}";

pub const ANSWER_EXPANSION_USER: &str = "Question: {question}
Original Answer: {original_answer}";

pub const CAPTION_EXPANSION_SYSTEM: &str = "Character Introduction
You are an expert in generating queries for encyclopedic retrieval. Given a question about the given image, you should:
1. Concisely caption the image which is most relevant to the question.
2. Retain the original query while expanding it with additional relevant information derived from both the visual content and world knowledge, to retrieve documents that best answer the question.
Response Format
Your final response must be in JSON format. For example:
{
    \"caption\": \"...\",
    \"query\": \"...\"
}";

pub const CAPTION_EXPANSION_USER: &str = "Here's the user query: {query}";
