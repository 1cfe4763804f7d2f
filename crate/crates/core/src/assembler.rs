//! Box injection into CoT text, and self-generated GCoT augmentation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distiller::{answer_matches, parse_answer_marker};
use crate::eval::AnswerMode;
use crate::extract::TargetExtractor;
use crate::gateway::{ChatRequest, Gateway, GENERATION_TEMPERATURE};
use crate::grounder::{find_quadruples, Grounder, LoadedImage};
use crate::model::{
    byte_to_char, char_to_byte, AnnotatedBox, CoTRecord, GCoTRecord, ModelError, NBox, Origin, QASample, Verdict,
    VerifiedBox,
};

/// Appended to the question when asking a GCoT-tuned model for candidates.
pub const GENERATE_INSTRUCTION: &str = "Answer step by step. After each object or number you rely on, give its bounding box as [x1, y1, x2, y2]. End with '*Answer*:' followed by the answer.";
pub const DEFAULT_CANDIDATES: usize = 8;
pub const DEFAULT_MAX_KEEP: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssembleError {
    #[error("span {start}..{end} no longer addresses {surface:?} in {sample_id}")]
    SpanDrift {
        sample_id: String,
        start: usize,
        end: usize,
        surface: String,
    },
    #[error("box for {surface:?} in {sample_id} has verdict {verdict:?}, not match")]
    NotVerified {
        sample_id: String,
        surface: String,
        verdict: Verdict,
    },
    #[error(transparent)]
    Box(#[from] ModelError),
}

/// Inserts ` [x1, y1, x2, y2]` after each verified target, last span first.
pub fn inject_boxes(cot: &CoTRecord, verified: &[VerifiedBox]) -> Result<GCoTRecord, AssembleError> {
    let mut boxes = Vec::with_capacity(verified.len());
    for vb in verified {
        let target = &vb.sub_question.target;
        if vb.verdict != Verdict::Match {
            return Err(AssembleError::NotVerified {
                sample_id: cot.sample_id.clone(),
                surface: target.surface.clone(),
                verdict: vb.verdict,
            });
        }
        let Some(bbox) = vb.bbox else {
            return Err(AssembleError::NotVerified {
                sample_id: cot.sample_id.clone(),
                surface: target.surface.clone(),
                verdict: vb.verdict,
            });
        };
        if target.check_in(&cot.cot_text).is_err() {
            return Err(AssembleError::SpanDrift {
                sample_id: cot.sample_id.clone(),
                start: target.span.start,
                end: target.span.end,
                surface: target.surface.clone(),
            });
        }
        boxes.push(AnnotatedBox {
            target: target.clone(),
            bbox: bbox.rounded()?,
        });
    }
    boxes.sort_by_key(|b| b.target.span);
    boxes.dedup_by(|a, b| a.target.span == b.target.span);

    let mut text = cot.cot_text.clone();
    for b in boxes.iter().rev() {
        let at = char_to_byte(&cot.cot_text, b.target.span.end).unwrap_or(text.len());
        text.insert_str(at, &format!(" {}", b.bbox));
    }
    Ok(GCoTRecord {
        sample_id: cot.sample_id.clone(),
        gcot_text: text,
        boxes,
        parsed_answer: cot.parsed_answer.clone(),
        answer_ok: cot.answer_ok,
        boxes_ok: true,
        origin: Origin::Assembled,
        unattributed_boxes: 0,
    })
}

/// Removes every coordinate quadruple (and the space before it) from `text`.
/// Returns the plain text and, per quadruple, its char offset in the plain
/// text and its raw coordinates.
pub fn strip_boxes(text: &str) -> (String, Vec<(usize, [f64; 4])>) {
    let mut plain = String::with_capacity(text.len());
    let mut found = Vec::new();
    let mut last = 0;
    for (range, coords) in find_quadruples(text) {
        let mut start = range.start;
        if start > last && text[..start].ends_with(' ') {
            start -= 1;
        }
        plain.push_str(&text[last..start]);
        found.push((plain.chars().count(), coords));
        last = range.end;
    }
    plain.push_str(&text[last..]);
    (plain, found)
}

/// Parses a generated GCoT. Each box is tied to the target that ends right
/// where the box was written; anything else counts as unattributed.
pub fn parse_gcot_text(extractor: &TargetExtractor, sample: &QASample, text: &str, mode: AnswerMode) -> GCoTRecord {
    let (plain, quads) = strip_boxes(text);
    let targets = extractor.scan(&plain);
    let mut boxes = Vec::new();
    let mut unattributed = 0;
    for (at, [a, b, c, d]) in quads {
        let prefix_end = char_to_byte(&plain, at).unwrap_or(plain.len());
        let end = byte_to_char(&plain, plain[..prefix_end].trim_end().len());
        let target = targets.iter().find(|t| t.span.end == end);
        match (target, NBox::new(a, b, c, d)) {
            (Some(t), Ok(bbox)) => boxes.push(AnnotatedBox {
                target: t.clone(),
                bbox,
            }),
            _ => unattributed += 1,
        }
    }
    let parsed = parse_answer_marker(text).ok();
    let answer_ok = parsed
        .as_ref()
        .is_some_and(|p| answer_matches(p, &sample.gold_answer, mode));
    GCoTRecord {
        sample_id: sample.sample_id.clone(),
        gcot_text: text.to_string(),
        boxes,
        parsed_answer: parsed.map(|p| p.preferred().to_string()),
        answer_ok,
        boxes_ok: false,
        origin: Origin::SelfGenerated,
        unattributed_boxes: unattributed,
    }
}

pub fn generation_prompt(question: &str) -> String {
    format!("{question}\n{GENERATE_INSTRUCTION}")
}

/// Result of selecting among one sample's candidates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub sample_id: String,
    pub kept: Vec<GCoTRecord>,
    pub passing: usize,
    /// `max_keep - kept.len()`.
    pub shortfall: usize,
    /// (candidate index, reason) for every rejected candidate.
    pub rejected: Vec<(usize, String)>,
}

#[derive(Debug, Clone)]
pub struct Augmenter {
    gateway: Gateway,
    model: String,
    grounder: Grounder,
    extractor: TargetExtractor,
    mode: AnswerMode,
    candidates: usize,
    max_keep: usize,
}

impl Augmenter {
    /// `model` generates candidates; the grounder re-verifies their boxes.
    pub fn new(gateway: Gateway, model: impl Into<String>, grounder: Grounder) -> Self {
        Self {
            gateway,
            model: model.into(),
            grounder,
            extractor: TargetExtractor::default(),
            mode: AnswerMode::Exact,
            candidates: DEFAULT_CANDIDATES,
            max_keep: DEFAULT_MAX_KEEP,
        }
    }

    pub fn with_candidates(mut self, k: usize) -> Self {
        self.candidates = k.max(1);
        self
    }

    pub fn with_max_keep(mut self, n: usize) -> Self {
        self.max_keep = n;
        self
    }

    pub fn with_answer_mode(mut self, mode: AnswerMode) -> Self {
        self.mode = mode;
        self
    }

    /// `k` candidates at the generation temperature; candidate `j` carries
    /// seed `j`. Failed requests are logged and skipped.
    pub fn generate_candidates(&self, sample: &QASample, image: &LoadedImage) -> Vec<GCoTRecord> {
        let prompt = generation_prompt(&sample.question);
        let results: Vec<_> = (0..self.candidates)
            .into_par_iter()
            .map(|j| {
                let request = ChatRequest::user(&self.model, prompt.clone(), Some(image.payload()))
                    .with_temperature(GENERATION_TEMPERATURE)
                    .with_seed(j as u64);
                self.gateway.complete(&request)
            })
            .collect();
        results
            .into_iter()
            .enumerate()
            .filter_map(|(j, r)| match r {
                Ok(text) => Some(parse_gcot_text(&self.extractor, sample, &text, self.mode)),
                Err(e) => {
                    log::warn!("candidate {j} for {} skipped: {e}", sample.sample_id);
                    None
                }
            })
            .collect()
    }

    fn check(&self, c: &GCoTRecord, sample: &QASample, image: &LoadedImage) -> Result<(), String> {
        if c.sample_id != sample.sample_id {
            return Err(format!("belongs to {}", c.sample_id));
        }
        if !c.answer_ok {
            return Err(format!("answer {:?} does not match gold", c.parsed_answer));
        }
        if c.unattributed_boxes > 0 {
            return Err(format!("{} box(es) not tied to a target", c.unattributed_boxes));
        }
        for b in &c.boxes {
            let (verdict, content, _) = self.grounder.verify_box(&b.target, &b.bbox, image);
            if verdict != Verdict::Match {
                return Err(format!("box for {:?} read back {content:?}", b.target.surface));
            }
        }
        Ok(())
    }

    /// Keeps the first `max_keep` candidates, in generation order, whose
    /// answer matches gold and whose every box re-verifies.
    pub fn verify_and_select(
        &self,
        candidates: &[GCoTRecord],
        sample: &QASample,
        image: &LoadedImage,
    ) -> SelectionOutcome {
        let checks: Vec<_> = candidates.par_iter().map(|c| self.check(c, sample, image)).collect();
        let mut out = SelectionOutcome {
            sample_id: sample.sample_id.clone(),
            kept: Vec::new(),
            passing: 0,
            shortfall: 0,
            rejected: Vec::new(),
        };
        for (i, (c, check)) in candidates.iter().zip(checks).enumerate() {
            match check {
                Ok(()) => {
                    out.passing += 1;
                    if out.kept.len() < self.max_keep {
                        out.kept.push(GCoTRecord {
                            boxes_ok: true,
                            ..c.clone()
                        });
                    }
                }
                Err(reason) => out.rejected.push((i, reason)),
            }
        }
        out.shortfall = self.max_keep.saturating_sub(out.kept.len());
        if out.shortfall > 0 {
            log::info!(
                "{}: kept {} of {} requested GCoTs (shortfall {})",
                sample.sample_id,
                out.kept.len(),
                self.max_keep,
                out.shortfall
            );
        }
        out
    }

    pub fn augment_one(&self, sample: &QASample) -> Result<SelectionOutcome, crate::grounder::GroundError> {
        let image = LoadedImage::load(&sample.image)?;
        let candidates = self.generate_candidates(sample, &image);
        Ok(self.verify_and_select(&candidates, sample, &image))
    }
}
