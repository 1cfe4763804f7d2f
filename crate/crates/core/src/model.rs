//! Domain types shared by every pipeline stage.
//!
//! Values are plain data: immutable once built, `Send + Sync`, and
//! serializable. Constructors enforce the invariants; serde deserialization
//! of boxes goes through [`NBox::new`] as well.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest admissible normalized box area.
pub const MIN_BOX_AREA: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("degenerate box [{x1}, {y1}, {x2}, {y2}] after clamping")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },
    #[error("box coordinate is not finite")]
    NonFiniteCoordinate,
    #[error("image {0} has a zero dimension")]
    EmptyImage(String),
    #[error("sample {0}: question is empty")]
    EmptyQuestion(String),
    #[error("sample {0}: gold answer is empty")]
    EmptyAnswer(String),
    #[error("span [{start}, {end}) does not hold {surface:?}")]
    SpanMismatch { start: usize, end: usize, surface: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub id: String,
    pub uri: PathBuf,
    pub width_px: u32,
    pub height_px: u32,
}

impl ImageRef {
    pub fn new(
        id: impl Into<String>,
        uri: impl Into<PathBuf>,
        width_px: u32,
        height_px: u32,
    ) -> Result<Self, ModelError> {
        let id = id.into();
        if width_px == 0 || height_px == 0 {
            return Err(ModelError::EmptyImage(id));
        }
        Ok(Self {
            id,
            uri: uri.into(),
            width_px,
            height_px,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetTag {
    Chartqa,
    Tabmwp,
    Sroie,
    Dvqa,
    Tatqa,
    Synth,
    /// Generic samples without a dataset tag.
    Other,
}

impl DatasetTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetTag::Chartqa => "chartqa",
            DatasetTag::Tabmwp => "tabmwp",
            DatasetTag::Sroie => "sroie",
            DatasetTag::Dvqa => "dvqa",
            DatasetTag::Tatqa => "tatqa",
            DatasetTag::Synth => "synth",
            DatasetTag::Other => "other",
        }
    }
}

/// One image, one question, one gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QASample {
    pub sample_id: String,
    pub image: ImageRef,
    pub question: String,
    pub gold_answer: String,
    pub dataset: DatasetTag,
}

impl QASample {
    pub fn new(
        sample_id: impl Into<String>,
        image: ImageRef,
        question: impl Into<String>,
        gold_answer: impl Into<String>,
        dataset: DatasetTag,
    ) -> Result<Self, ModelError> {
        let sample_id = sample_id.into();
        let question = question.into();
        let gold_answer = gold_answer.into();
        if question.trim().is_empty() {
            return Err(ModelError::EmptyQuestion(sample_id));
        }
        if gold_answer.trim().is_empty() {
            return Err(ModelError::EmptyAnswer(sample_id));
        }
        Ok(Self {
            sample_id,
            image,
            question,
            gold_answer,
            dataset,
        })
    }
}

/// Distilled reasoning for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoTRecord {
    pub sample_id: String,
    pub source_model: String,
    pub cot_text: String,
    pub parsed_answer: Option<String>,
    pub answer_ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Noun,
    Number,
}

/// Half-open range of character (not byte) offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// The substring of `text` covered by this span, if the span fits.
    pub fn slice<'a>(&self, text: &'a str) -> Option<&'a str> {
        if self.is_empty() {
            return None;
        }
        let start = char_to_byte(text, self.start)?;
        let end = char_to_byte(text, self.end)?;
        Some(&text[start..end])
    }
}

/// Byte offset of the `chars`-th character, allowing one-past-the-end.
pub fn char_to_byte(text: &str, chars: usize) -> Option<usize> {
    if chars == 0 {
        return Some(0);
    }
    match text.char_indices().nth(chars) {
        Some((b, _)) => Some(b),
        None if text.chars().count() == chars => Some(text.len()),
        None => None,
    }
}

/// Character offset of a byte offset that lies on a char boundary.
pub fn byte_to_char(text: &str, byte: usize) -> usize {
    text[..byte].chars().count()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Target {
    pub surface: String,
    pub kind: TargetKind,
    pub span: Span,
}

impl Target {
    /// Checks that `span` addresses `surface` inside `text`.
    pub fn check_in(&self, text: &str) -> Result<(), ModelError> {
        match self.span.slice(text) {
            Some(s) if s == self.surface => Ok(()),
            _ => Err(ModelError::SpanMismatch {
                start: self.span.start,
                end: self.span.end,
                surface: self.surface.clone(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubQuestion {
    pub target: Target,
    pub prompt: String,
    /// 1-based position among the targets of its CoT.
    pub index_t: usize,
}

/// Normalized `[x_min, y_min, x_max, y_max]` box, origin top-left.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl NBox {
    /// Clamps every coordinate into `[0, 1]`, then checks ordering and area.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, ModelError> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFiniteCoordinate);
        }
        let [x1, y1, x2, y2] = [x1, y1, x2, y2].map(|v| v.clamp(0.0, 1.0));
        if x1 >= x2 || y1 >= y2 || (x2 - x1) * (y2 - y1) < MIN_BOX_AREA {
            return Err(ModelError::DegenerateBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &NBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// The box as it reads once rendered with three decimals.
    pub fn rounded(&self) -> Result<Self, ModelError> {
        let r = |v: f64| (v * 1000.0).round() / 1000.0;
        NBox::new(r(self.x1), r(self.y1), r(self.x2), r(self.y2))
    }
}

/// Renders as `[x1, y1, x2, y2]` with exactly three decimals.
impl fmt::Display for NBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:.3}, {:.3}, {:.3}, {:.3}]", self.x1, self.y1, self.x2, self.y2)
    }
}

impl<'de> Deserialize<'de> for NBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            x1: f64,
            y1: f64,
            x2: f64,
            y2: f64,
        }
        let r = Raw::deserialize(d)?;
        NBox::new(r.x1, r.y1, r.x2, r.y2).map_err(serde::de::Error::custom)
    }
}

/// Operation form of [`NBox::new`].
pub fn validate_nbox(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<NBox, ModelError> {
    NBox::new(x1, y1, x2, y2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Match,
    Mismatch,
    Unreadable,
}

/// Outcome of one crop-read-match attempt. Only `Verdict::Match` boxes are
/// admitted to a sample's verified set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifiedBox {
    pub sample_id: String,
    pub sub_question: SubQuestion,
    /// Absent when no box could be obtained from the completion.
    #[serde(rename = "box")]
    pub bbox: Option<NBox>,
    pub read_content: String,
    pub verdict: Verdict,
    pub iteration: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Assembled,
    SelfGenerated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedBox {
    /// Span is relative to the GCoT text with all coordinate annotations removed.
    pub target: Target,
    #[serde(rename = "box")]
    pub bbox: NBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GCoTRecord {
    pub sample_id: String,
    pub gcot_text: String,
    pub boxes: Vec<AnnotatedBox>,
    pub parsed_answer: Option<String>,
    pub answer_ok: bool,
    pub boxes_ok: bool,
    pub origin: Origin,
    /// Quadruples in the text that could not be tied to a preceding target.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub unattributed_boxes: usize,
}

fn is_zero(n: &usize) -> bool {
    *n == 0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainTask {
    Grounding,
    Gcot,
}

/// Handed to the external trainer; the defaults are the adapter
/// hyperparameters the pipeline was designed around.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingManifest {
    pub task: TrainTask,
    pub records_uri: PathBuf,
    pub base_model: String,
    pub lora_rank: u32,
    pub lora_alpha: u32,
    pub learning_rate: f64,
    pub epochs: u32,
}

impl TrainingManifest {
    pub const DEFAULT_LORA_RANK: u32 = 16;
    pub const DEFAULT_LORA_ALPHA: u32 = 32;
    pub const DEFAULT_LEARNING_RATE: f64 = 2e-4;
    pub const DEFAULT_EPOCHS: u32 = 1;

    pub fn new(task: TrainTask, records_uri: impl Into<PathBuf>, base_model: impl Into<String>) -> Self {
        Self {
            task,
            records_uri: records_uri.into(),
            base_model: base_model.into(),
            lora_rank: Self::DEFAULT_LORA_RANK,
            lora_alpha: Self::DEFAULT_LORA_ALPHA,
            learning_rate: Self::DEFAULT_LEARNING_RATE,
            epochs: Self::DEFAULT_EPOCHS,
        }
    }
}

/// Accuracy over the seeds of one sample size, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sample_size: usize,
    pub seeds: Vec<u64>,
    pub per_seed_accuracy: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl EvalReport {
    /// Panics if `seeds` and `per_seed_accuracy` differ in length.
    pub fn from_runs(sample_size: usize, seeds: Vec<u64>, per_seed_accuracy: Vec<f64>) -> Self {
        assert_eq!(seeds.len(), per_seed_accuracy.len());
        let (mean, std) = mean_and_population_std(&per_seed_accuracy);
        Self {
            sample_size,
            seeds,
            per_seed_accuracy,
            mean,
            std,
        }
    }
}

pub fn mean_and_population_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn box_from_price_cell_is_valid() {
        let b = validate_nbox(0.611, 0.381, 0.875, 0.455).unwrap();
        assert_eq!(b.to_string(), "[0.611, 0.381, 0.875, 0.455]");
    }

    #[test]
    fn zero_width_box_is_degenerate() {
        assert!(matches!(
            validate_nbox(0.5, 0.5, 0.5, 0.9),
            Err(ModelError::DegenerateBox { .. })
        ));
    }

    #[test]
    fn out_of_range_coordinates_are_clamped() {
        let b = validate_nbox(-0.1, 0.2, 0.3, 1.4).unwrap();
        assert_eq!(
            b,
            NBox {
                x1: 0.0,
                y1: 0.2,
                x2: 0.3,
                y2: 1.0
            }
        );
    }

    #[test]
    fn full_image_box_is_accepted() {
        assert!(validate_nbox(0.0, 0.0, 1.0, 1.0).is_ok());
    }

    #[test]
    fn tiny_area_and_nan_are_rejected() {
        assert!(validate_nbox(0.1, 0.1, 0.1005, 0.1005).is_err());
        assert_eq!(
            validate_nbox(f64::NAN, 0.1, 0.2, 0.3),
            Err(ModelError::NonFiniteCoordinate)
        );
    }

    #[test]
    fn deserializing_a_bad_box_fails() {
        let r: Result<NBox, _> = serde_json::from_str(r#"{"x1":0.5,"y1":0.1,"x2":0.4,"y2":0.3}"#);
        assert!(r.is_err());
    }

    #[test]
    fn sample_rejects_blank_fields() {
        let img = ImageRef::new("i", "i.png", 10, 10).unwrap();
        assert!(matches!(
            QASample::new("s", img.clone(), "  ", "1", DatasetTag::Synth),
            Err(ModelError::EmptyQuestion(_))
        ));
        assert!(matches!(
            QASample::new("s", img, "q?", "", DatasetTag::Synth),
            Err(ModelError::EmptyAnswer(_))
        ));
        assert!(ImageRef::new("i", "i.png", 0, 10).is_err());
    }

    #[test]
    fn spans_count_characters() {
        let text = "€1.85 for beef";
        let span = Span::new(10, 14);
        assert_eq!(span.slice(text), Some("beef"));
        assert_eq!(Span::new(0, 5).slice(text), Some("€1.85"));
        assert_eq!(Span::new(10, 15).slice(text), None);
    }

    #[test]
    fn manifest_defaults() {
        let m = TrainingManifest::new(TrainTask::Gcot, "x.jsonl", "base");
        assert_eq!((m.lora_rank, m.lora_alpha, m.epochs), (16, 32, 1));
        assert_eq!(m.learning_rate, 2e-4);
    }

    #[test]
    fn population_std_of_three_seeds() {
        let r = EvalReport::from_runs(8, vec![1, 2, 3], vec![20.0, 25.0, 30.0]);
        assert_eq!(r.mean, 25.0);
        // sqrt(50/3)
        assert!((r.std - 4.082_482_904_638_63).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn accepted_boxes_satisfy_invariants(
            a in -0.5f64..1.5, b in -0.5f64..1.5, c in -0.5f64..1.5, d in -0.5f64..1.5
        ) {
            if let Ok(n) = validate_nbox(a, b, c, d) {
                prop_assert!(0.0 <= n.x1 && n.x1 < n.x2 && n.x2 <= 1.0);
                prop_assert!(0.0 <= n.y1 && n.y1 < n.y2 && n.y2 <= 1.0);
                prop_assert!(n.area() >= MIN_BOX_AREA);
            }
        }
    }
}
