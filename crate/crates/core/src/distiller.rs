//! Initial chain-of-thought generation by a third-party model.

use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{answers_equivalent, AnswerMode};
use crate::gateway::{ChatRequest, Gateway};
use crate::grounder::image_payload;
use crate::model::{CoTRecord, QASample};

pub const ANSWER_MARKER: &str = "*Answer*:";

const DISTILL_PREFIX: &str = "Based on the following question: ";
const DISTILL_SUFFIX: &str = "Your task is to give a explanation for the question. Give step by step reasoning to get the answer, and when you're ready to answer, please use the format '*Answer*:'";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnswerParseError {
    #[error("no \"*Answer*:\" marker in completion")]
    MarkerMissing,
    #[error("answer marker is followed by nothing")]
    EmptyAnswer,
}

/// The text after the final answer marker.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedAnswer {
    pub raw: String,
    /// Leading numeric token of `raw`, when there is one.
    pub numeric: Option<String>,
}

impl ParsedAnswer {
    /// What the answer checker compares first.
    pub fn preferred(&self) -> &str {
        self.numeric.as_deref().unwrap_or(&self.raw)
    }
}

pub fn build_distill_prompt(sample: &QASample) -> String {
    format!("{DISTILL_PREFIX}{}\n{DISTILL_SUFFIX}", sample.question)
}

/// True if `prompt` was produced by [`build_distill_prompt`].
pub fn is_distill_prompt(prompt: &str) -> bool {
    prompt.starts_with(DISTILL_PREFIX) && prompt.ends_with(DISTILL_SUFFIX)
}

/// Recovers the question from a distillation prompt.
pub fn question_of_distill_prompt(prompt: &str) -> Option<&str> {
    prompt
        .strip_prefix(DISTILL_PREFIX)?
        .strip_suffix(DISTILL_SUFFIX)?
        .strip_suffix('\n')
}

fn leading_number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^[$€£¥]?-?\d[\d,]*(?:\.\d+)?%?").unwrap())
}

/// Reads the answer following the last `*Answer*:` marker.
///
/// Only the first non-empty line after the marker counts.
pub fn parse_answer_marker(cot_text: &str) -> Result<ParsedAnswer, AnswerParseError> {
    let at = cot_text.rfind(ANSWER_MARKER).ok_or(AnswerParseError::MarkerMissing)?;
    let tail = &cot_text[at + ANSWER_MARKER.len()..];
    let raw = tail
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .ok_or(AnswerParseError::EmptyAnswer)?
        .to_string();
    let numeric = leading_number_re().find(&raw).and_then(|m| {
        let rest = &raw[m.end()..];
        let clean_end = rest.chars().next().is_none_or(|c| !c.is_alphanumeric());
        (clean_end && m.as_str().chars().any(|c| c.is_ascii_digit())).then(|| m.as_str().to_string())
    });
    Ok(ParsedAnswer { raw, numeric })
}

/// Whether the parsed answer agrees with the gold answer. The numeric token
/// is tried first, then the raw string.
pub fn answer_matches(parsed: &ParsedAnswer, gold: &str, mode: AnswerMode) -> bool {
    answers_equivalent(parsed.preferred(), gold, mode) || answers_equivalent(&parsed.raw, gold, mode)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillFailure {
    pub sample_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistillOutcome {
    pub records: Vec<CoTRecord>,
    pub failures: Vec<DistillFailure>,
}

#[derive(Debug, Clone)]
pub struct Distiller {
    gateway: Gateway,
    model: String,
    max_tokens: u32,
    mode: AnswerMode,
}

impl Distiller {
    pub fn new(gateway: Gateway, model: impl Into<String>) -> Self {
        Self {
            gateway,
            model: model.into(),
            max_tokens: crate::gateway::DEFAULT_MAX_TOKENS,
            mode: AnswerMode::Exact,
        }
    }

    pub fn with_max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn with_answer_mode(mut self, mode: AnswerMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn distill_one(&self, sample: &QASample) -> Result<CoTRecord, DistillFailure> {
        let fail = |reason: String| DistillFailure {
            sample_id: sample.sample_id.clone(),
            reason,
        };
        let image = image_payload(&sample.image).map_err(|e| fail(e.to_string()))?;
        let request =
            ChatRequest::user(&self.model, build_distill_prompt(sample), Some(image)).with_max_tokens(self.max_tokens);
        let cot_text = self.gateway.complete(&request).map_err(|e| fail(e.to_string()))?;
        let parsed = parse_answer_marker(&cot_text).ok();
        let answer_ok = parsed
            .as_ref()
            .is_some_and(|p| answer_matches(p, &sample.gold_answer, self.mode));
        Ok(CoTRecord {
            sample_id: sample.sample_id.clone(),
            source_model: self.model.clone(),
            cot_text,
            parsed_answer: parsed.map(|p| p.preferred().to_string()),
            answer_ok,
        })
    }

    /// One record per sample, in input order. A failed request becomes a
    /// [`DistillFailure`] instead of aborting the batch.
    pub fn distill(&self, samples: &[QASample]) -> DistillOutcome {
        let results: Vec<_> = samples.par_iter().map(|s| self.distill_one(s)).collect();
        let mut out = DistillOutcome::default();
        for r in results {
            match r {
                Ok(rec) => out.records.push(rec),
                Err(f) => {
                    log::warn!("distill failed for {}: {}", f.sample_id, f.reason);
                    out.failures.push(f)
                }
            }
        }
        out
    }
}
