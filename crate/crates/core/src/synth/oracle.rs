//! Deterministic stand-in for the chat backend, answering from world truth.
//!
//! Every answer is a pure function of (world, policy, request). The bootstrap
//! stage is read from the model name (`<base>+boot<k>`), so a "trained" model
//! is simply a name the oracle maps to a later recall-schedule entry.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CellKind, SynthImage, SynthWorld};
use crate::assembler::GENERATE_INSTRUCTION;
use crate::bootstrap::model_stage;
use crate::distiller::{question_of_distill_prompt, ANSWER_MARKER};
use crate::extract::is_number_surface;
use crate::gateway::{BackendProfile, ChatRequest, Gateway, GatewayError, Transport};
use crate::grounder::{parse_crop_provenance, sha256_hex, GROUNDING_INSTRUCTION, READ_PROMPT};
use crate::model::NBox;
use crate::normalize::parse_decimal;

pub const ORACLE_PROFILE: &str = "oracle";
pub const ORACLE_ENDPOINT: &str = "oracle://synth";
pub const REFUSAL: &str = "I cannot find it in the image.";

pub const SALT_RECALL: u64 = 1;
pub const SALT_JITTER: u64 = 2;
pub const SALT_CONTENT: u64 = 3;
pub const SALT_FACTUAL: u64 = 4;

const SUBQ_PREFIX: &str = "Where is the ";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("cannot classify prompt {0:?}")]
    UnclassifiablePrompt(String),
    #[error("invalid oracle policy: {0}")]
    InvalidPolicy(String),
    #[error("no synth sample matches {0}")]
    UnknownSample(String),
}

/// How the oracle answers one generation candidate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateScript {
    /// Correct answer, every box on its cell.
    Correct,
    /// Boxes correct, answer off by one dollar.
    WrongAnswer,
    /// Correct answer, second price boxed on the wrong cell.
    BadBox,
    /// Correct reasoning without the answer marker.
    NoMarker,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OraclePolicy {
    /// Recall of the grounding model at bootstrap stage k; the last entry
    /// repeats for later stages.
    #[serde(default = "default_recall")]
    pub recall_schedule: Vec<f64>,
    #[serde(default)]
    pub box_jitter_rate: f64,
    #[serde(default)]
    pub wrong_content_rate: f64,
    /// Share of distilled CoTs citing a price that is not in the image.
    #[serde(default)]
    pub factual_error_rate: f64,
    /// Generation candidate j follows entry `j % len`.
    #[serde(default = "default_script")]
    pub candidate_script: Vec<CandidateScript>,
    #[serde(default)]
    pub seed: u64,
}

fn default_recall() -> Vec<f64> {
    vec![1.0]
}

fn default_script() -> Vec<CandidateScript> {
    vec![CandidateScript::Correct]
}

impl Default for OraclePolicy {
    fn default() -> Self {
        Self {
            recall_schedule: default_recall(),
            box_jitter_rate: 0.0,
            wrong_content_rate: 0.0,
            factual_error_rate: 0.0,
            candidate_script: default_script(),
            seed: 0,
        }
    }
}

impl OraclePolicy {
    pub fn validate(&self) -> Result<(), OracleError> {
        if self.recall_schedule.is_empty() {
            return Err(OracleError::InvalidPolicy("recall_schedule is empty".into()));
        }
        if self.candidate_script.is_empty() {
            return Err(OracleError::InvalidPolicy("candidate_script is empty".into()));
        }
        let fractions = self.recall_schedule.iter().copied().chain([
            self.box_jitter_rate,
            self.wrong_content_rate,
            self.factual_error_rate,
        ]);
        for f in fractions {
            if !(0.0..=1.0).contains(&f) {
                return Err(OracleError::InvalidPolicy(format!("fraction {f} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn recall_at(&self, stage: u32) -> f64 {
        let i = (stage as usize).min(self.recall_schedule.len() - 1);
        self.recall_schedule[i]
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform draw in [0, 1) keyed by a string, the policy seed, stage and purpose.
pub fn unit_draw(key: &str, seed: u64, stage: u32, salt: u64) -> f64 {
    let u = splitmix64(fnv1a64(key.as_bytes()) ^ splitmix64(seed ^ ((stage as u64) << 32) ^ salt));
    (u >> 11) as f64 / (1u64 << 53) as f64
}

/// Key of a grounding draw: the image digest and the case-folded surface.
pub fn ground_key(image_sha256: &str, surface: &str) -> String {
    format!("{image_sha256}|{}", surface.to_lowercase())
}

fn rot13(s: &str) -> String {
    s.chars()
        .map(|c| match c {
            'a'..='z' => (((c as u8 - b'a') + 13) % 26 + b'a') as char,
            'A'..='Z' => (((c as u8 - b'A') + 13) % 26 + b'A') as char,
            _ => c,
        })
        .collect()
}

fn price_cents(text: &str) -> Option<i64> {
    parse_decimal(text).map(|v| (v * 100.0).round() as i64)
}

fn format_price(cents: i64) -> String {
    format!("${}.{:02}", cents / 100, cents % 100)
}

#[derive(Debug)]
pub struct ScriptedOracle {
    world: Arc<SynthWorld>,
    policy: OraclePolicy,
    by_digest: HashMap<String, usize>,
}

enum PromptKind<'a> {
    Distill(&'a str),
    Generate(&'a str),
    Ground(&'a str),
    Read,
}

fn classify(prompt: &str) -> Option<PromptKind<'_>> {
    if let Some(q) = question_of_distill_prompt(prompt) {
        return Some(PromptKind::Distill(q));
    }
    if let Some(q) = prompt.strip_suffix(GENERATE_INSTRUCTION) {
        return Some(PromptKind::Generate(q.strip_suffix('\n').unwrap_or(q)));
    }
    if let Some(head) = prompt.strip_suffix(GROUNDING_INSTRUCTION) {
        let surface = head.trim_end().strip_prefix(SUBQ_PREFIX)?.strip_suffix('?')?;
        return Some(PromptKind::Ground(surface));
    }
    (prompt.trim() == READ_PROMPT).then_some(PromptKind::Read)
}

impl ScriptedOracle {
    pub fn new(world: Arc<SynthWorld>, policy: OraclePolicy) -> Result<Self, OracleError> {
        policy.validate()?;
        let by_digest = world
            .images
            .iter()
            .enumerate()
            .map(|(i, img)| (img.sha256.clone(), i))
            .collect();
        Ok(Self {
            world,
            policy,
            by_digest,
        })
    }

    pub fn policy(&self) -> &OraclePolicy {
        &self.policy
    }

    pub fn answer(&self, request: &ChatRequest) -> Result<String, OracleError> {
        let prompt = request.prompt_text();
        let stage = model_stage(&request.model);
        let image = request
            .image()
            .and_then(|bytes| self.by_digest.get(&sha256_hex(bytes)).copied());
        match classify(&prompt) {
            Some(PromptKind::Distill(q)) => self.distill(image, q),
            Some(PromptKind::Generate(q)) => {
                let j = request.seed.unwrap_or(0) as usize % self.policy.candidate_script.len();
                self.generate(image, q, self.policy.candidate_script[j])
            }
            Some(PromptKind::Ground(surface)) => Ok(self.ground(image, surface, stage)),
            Some(PromptKind::Read) => Ok(self.read(request.image(), stage)),
            None => Err(OracleError::UnclassifiablePrompt(prompt.chars().take(200).collect())),
        }
    }

    fn qa_rows(&self, image: Option<usize>, question: &str) -> Result<(&SynthImage, [usize; 2], &str), OracleError> {
        let unknown = || OracleError::UnknownSample(format!("question {question:?}"));
        let idx = image.ok_or_else(unknown)?;
        let qa = self
            .world
            .qa
            .iter()
            .find(|q| q.image_index == idx && q.sample.question == question)
            .ok_or_else(unknown)?;
        Ok((&self.world.images[idx], qa.rows, &qa.sample.gold_answer))
    }

    fn texts(img: &SynthImage, rows: [usize; 2]) -> Option<[String; 4]> {
        let t = |k, r| img.cell(k, r).map(|c| c.text.clone());
        Some([
            t(CellKind::Name, rows[0])?,
            t(CellKind::Price, rows[0])?,
            t(CellKind::Name, rows[1])?,
            t(CellKind::Price, rows[1])?,
        ])
    }

    fn distill(&self, image: Option<usize>, question: &str) -> Result<String, OracleError> {
        let (img, rows, gold) = self.qa_rows(image, question)?;
        let [a, pa, b, mut pb] = Self::texts(img, rows).ok_or_else(|| OracleError::UnknownSample(question.into()))?;
        let key = format!("{}|{question}", img.sha256);
        if unit_draw(&key, self.policy.seed, 0, SALT_FACTUAL) < self.policy.factual_error_rate {
            let present: Vec<i64> = img
                .cells
                .iter()
                .filter(|c| c.kind == CellKind::Price)
                .filter_map(|c| price_cents(&c.text))
                .collect();
            let mut cents = price_cents(&pb).unwrap_or(0) + 7;
            while present.contains(&cents) {
                cents += 7;
            }
            pb = format_price(cents);
        }
        Ok(format!(
            "We look up both items in the table. The {a} costs {pa}. The {b} costs {pb}. \
             Adding both prices gives the combined amount. {ANSWER_MARKER} {gold}"
        ))
    }

    fn generate(&self, image: Option<usize>, question: &str, script: CandidateScript) -> Result<String, OracleError> {
        let (img, rows, gold) = self.qa_rows(image, question)?;
        let [a, pa, b, pb] = Self::texts(img, rows).ok_or_else(|| OracleError::UnknownSample(question.into()))?;
        let bx = |k, r: usize| {
            img.cell(k, r)
                .and_then(|c| c.bbox.rounded().ok())
                .map(|b| b.to_string())
        };
        let na = bx(CellKind::Name, rows[0]).unwrap_or_default();
        let npa = bx(CellKind::Price, rows[0]).unwrap_or_default();
        let nb = bx(CellKind::Name, rows[1]).unwrap_or_default();
        let mut npb = bx(CellKind::Price, rows[1]).unwrap_or_default();
        if script == CandidateScript::BadBox {
            npb = nb.clone();
        }
        let answer = match script {
            CandidateScript::WrongAnswer => {
                let c = price_cents(gold).unwrap_or(0) + 100;
                format!("{}.{:02}", c / 100, c % 100)
            }
            _ => gold.to_string(),
        };
        let body = format!(
            "We look up both items in the table. The {a} {na} costs {pa} {npa}. The {b} {nb} costs {pb} {npb}. \
             Adding both prices gives the combined amount."
        );
        Ok(match script {
            CandidateScript::NoMarker => format!("{body} So the total is {answer}"),
            _ => format!("{body} {ANSWER_MARKER} {answer}"),
        })
    }

    fn find_cell(img: &SynthImage, surface: &str) -> Option<usize> {
        if is_number_surface(surface) {
            let want = price_cents(surface)?;
            img.cells
                .iter()
                .position(|c| c.kind == CellKind::Price && price_cents(&c.text) == Some(want))
        } else {
            let want = surface.to_lowercase();
            img.cells
                .iter()
                .position(|c| c.kind == CellKind::Name && c.text.to_lowercase() == want)
        }
    }

    /// The cell box moved onto the nearest other row of its column, below when possible.
    fn jittered(img: &SynthImage, cell: usize) -> Option<NBox> {
        let c = &img.cells[cell];
        let rows = img.cells.iter().filter(|o| o.kind == c.kind).count();
        let other = if c.row + 1 < rows {
            c.row + 1
        } else {
            c.row.checked_sub(1)?
        };
        let n = img.cell(c.kind, other)?;
        let dy = n.bbox.y1 - c.bbox.y1;
        NBox::new(c.bbox.x1, c.bbox.y1 + dy, c.bbox.x2, c.bbox.y2 + dy).ok()
    }

    fn ground(&self, image: Option<usize>, surface: &str, stage: u32) -> String {
        let Some(img) = image.map(|i| &self.world.images[i]) else {
            return REFUSAL.to_string();
        };
        let Some(cell) = Self::find_cell(img, surface) else {
            return REFUSAL.to_string();
        };
        let key = ground_key(&img.sha256, surface);
        let seed = self.policy.seed;
        let bbox = if unit_draw(&key, seed, stage, SALT_RECALL) < self.policy.recall_at(stage) {
            Some(img.cells[cell].bbox)
        } else if unit_draw(&key, seed, stage, SALT_JITTER) < self.policy.box_jitter_rate {
            Self::jittered(img, cell)
        } else {
            None
        };
        match bbox.and_then(|b| b.rounded().ok()) {
            Some(b) => format!("The {surface} is at {b}."),
            None => REFUSAL.to_string(),
        }
    }

    fn read(&self, crop: Option<&[u8]>, stage: u32) -> String {
        let Some(prov) = crop.and_then(parse_crop_provenance) else {
            return String::new();
        };
        let Some(&idx) = self.by_digest.get(&prov.source_sha256) else {
            return String::new();
        };
        let img = &self.world.images[idx];
        let Ok(window) = prov.rect.to_nbox(img.image.width_px, img.image.height_px) else {
            return String::new();
        };
        let best = img
            .cells
            .iter()
            .map(|c| {
                let overlap = window.intersection_area(&c.bbox);
                (c, overlap / c.bbox.area(), overlap)
            })
            .filter(|(_, _, overlap)| *overlap > 0.0)
            .max_by(|a, b| {
                a.1.total_cmp(&b.1)
                    .then(a.2.total_cmp(&b.2))
                    .then_with(|| b.0.id.cmp(&a.0.id))
            });
        let Some((cell, _, _)) = best else {
            return String::new();
        };
        let key = format!("{}|{}", img.sha256, cell.id);
        if unit_draw(&key, self.policy.seed, stage, SALT_CONTENT) < self.policy.wrong_content_rate {
            return match cell.kind {
                CellKind::Price => format_price(price_cents(&cell.text).unwrap_or(0) + 100),
                CellKind::Name => rot13(&cell.text),
            };
        }
        cell.text.clone()
    }
}

impl Transport for ScriptedOracle {
    fn send(&self, _: &BackendProfile, request: &ChatRequest) -> Result<String, GatewayError> {
        self.answer(request).map_err(|e| GatewayError::Backend(e.to_string()))
    }
}

/// A gateway whose completions come from the scripted oracle.
pub fn oracle_configure(world: Arc<SynthWorld>, policy: OraclePolicy) -> Result<Gateway, OracleError> {
    let oracle = ScriptedOracle::new(world, policy)?;
    let mut profile = BackendProfile::new(ORACLE_PROFILE, ORACLE_ENDPOINT);
    profile.max_retries = 0;
    profile.max_in_flight = 16;
    Ok(Gateway::new(profile, Arc::new(oracle)))
}
