//! Ask for a box, crop it, read the crop back, compare with the target.

use std::io::Cursor;
use std::sync::OnceLock;

use image::{DynamicImage, GenericImageView, ImageFormat};
use regex::Regex;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::model::{ImageRef, ModelError, NBox, SubQuestion, Target, TargetKind, Verdict, VerifiedBox};
use crate::normalize::{edit_similarity, parse_decimal, relative_eq, word_tokens};

pub const GROUNDING_INSTRUCTION: &str = "Please provide the bounding box coordinate of the region.";
pub const READ_PROMPT: &str = "The content in this image is:";
pub const DEFAULT_PAD_FRAC: f64 = 0.02;
pub const MAX_PAD_FRAC: f64 = 0.1;
pub const MIN_CROP_PX: u32 = 8;
/// PNG `tEXt` keyword recording where a crop came from.
pub const CROP_PROVENANCE_KEY: &str = "gcot-crop";

const NUMBER_TOLERANCE: f64 = 1e-6;
const NOUN_SIMILARITY: f64 = 0.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroundError {
    #[error("no [x1, y1, x2, y2] quadruple in completion {0:?}")]
    NoBoxInCompletion(String),
    #[error(transparent)]
    Box(#[from] ModelError),
    #[error("crop of {w}x{h} px is below the {MIN_CROP_PX} px minimum")]
    CropTooSmall { w: u32, h: u32 },
    #[error("padding fraction {0} outside [0, 0.1]")]
    BadPadding(f64),
    #[error("cannot decode image: {0}")]
    ImageDecode(String),
    #[error("cannot read image {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Integer pixel rectangle within an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PixelRect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl PixelRect {
    pub fn to_nbox(&self, width: u32, height: u32) -> Result<NBox, ModelError> {
        let (w, h) = (width as f64, height as f64);
        NBox::new(
            self.x as f64 / w,
            self.y as f64 / h,
            (self.x + self.w) as f64 / w,
            (self.y + self.h) as f64 / h,
        )
    }
}

fn quad_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let num = r"\s*(-?\d+(?:\.\d+)?)\s*";
        Regex::new(&format!(r"\[{num},{num},{num},{num}\]")).unwrap()
    })
}

/// Every `[a, b, c, d]` decimal quadruple in `text` with its byte range.
pub fn find_quadruples(text: &str) -> Vec<(std::ops::Range<usize>, [f64; 4])> {
    quad_re()
        .captures_iter(text)
        .filter_map(|c| {
            let mut v = [0.0; 4];
            for (i, slot) in v.iter_mut().enumerate() {
                *slot = c[i + 1].parse().ok()?;
            }
            Some((c.get(0).unwrap().range(), v))
        })
        .collect()
}

/// First quadruple in a grounding completion, validated.
pub fn parse_box_completion(text: &str) -> Result<NBox, GroundError> {
    let (_, [a, b, c, d]) = find_quadruples(text)
        .into_iter()
        .next()
        .ok_or_else(|| GroundError::NoBoxInCompletion(text.chars().take(200).collect()))?;
    Ok(NBox::new(a, b, c, d)?)
}

pub fn grounding_prompt(subq: &SubQuestion) -> String {
    format!("{} {GROUNDING_INSTRUCTION}", subq.prompt)
}

fn snap(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Pads `bbox` by `pad_frac` of the image size on each side, clamps, and
/// converts to pixels (floor for the top-left edge, ceil for bottom-right).
pub fn to_pixel_rect(bbox: &NBox, width: u32, height: u32, pad_frac: f64) -> Result<PixelRect, GroundError> {
    if !(0.0..=MAX_PAD_FRAC).contains(&pad_frac) {
        return Err(GroundError::BadPadding(pad_frac));
    }
    let (w, h) = (width as f64, height as f64);
    let left = snap((bbox.x1 - pad_frac) * w).floor().max(0.0) as u32;
    let top = snap((bbox.y1 - pad_frac) * h).floor().max(0.0) as u32;
    let right = (snap((bbox.x2 + pad_frac) * w).ceil() as u32).min(width);
    let bottom = (snap((bbox.y2 + pad_frac) * h).ceil() as u32).min(height);
    let rect = PixelRect {
        x: left,
        y: top,
        w: right.saturating_sub(left),
        h: bottom.saturating_sub(top),
    };
    if rect.w < MIN_CROP_PX || rect.h < MIN_CROP_PX {
        return Err(GroundError::CropTooSmall { w: rect.w, h: rect.h });
    }
    Ok(rect)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// An image read from disk, decoded lazily once.
#[derive(Debug)]
pub struct LoadedImage {
    pub image: ImageRef,
    pub bytes: Vec<u8>,
    pub media_type: String,
    decoded: OnceLock<Result<DynamicImage, String>>,
}

impl LoadedImage {
    pub fn load(image: &ImageRef) -> Result<Self, GroundError> {
        let bytes = std::fs::read(&image.uri).map_err(|e| GroundError::Io {
            path: image.uri.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Self::from_bytes(image.clone(), bytes))
    }

    pub fn from_bytes(image: ImageRef, bytes: Vec<u8>) -> Self {
        let media_type = media_type_of(&bytes).to_string();
        Self {
            image,
            bytes,
            media_type,
            decoded: OnceLock::new(),
        }
    }

    pub fn decoded(&self) -> Result<&DynamicImage, GroundError> {
        self.decoded
            .get_or_init(|| image::load_from_memory(&self.bytes).map_err(|e| e.to_string()))
            .as_ref()
            .map_err(|e| GroundError::ImageDecode(e.clone()))
    }

    pub fn payload(&self) -> (String, Vec<u8>) {
        (self.media_type.clone(), self.bytes.clone())
    }
}

pub fn media_type_of(bytes: &[u8]) -> &'static str {
    match image::guess_format(bytes) {
        Ok(ImageFormat::Jpeg) => "image/jpeg",
        Ok(ImageFormat::Png) => "image/png",
        _ => "application/octet-stream",
    }
}

/// Media type and bytes of an image file, ready to attach to a request.
pub fn image_payload(image: &ImageRef) -> Result<(String, Vec<u8>), GroundError> {
    Ok(LoadedImage::load(image)?.payload())
}

/// Where a crop was cut from: source image digest and pixel rectangle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CropProvenance {
    pub source_sha256: String,
    pub rect: PixelRect,
}

impl CropProvenance {
    fn render(&self) -> String {
        let r = self.rect;
        format!("{} {} {} {} {}", self.source_sha256, r.x, r.y, r.w, r.h)
    }

    fn parse(s: &str) -> Option<Self> {
        let mut it = s.split_whitespace();
        let source_sha256 = it.next()?.to_string();
        let mut n = [0u32; 4];
        for slot in &mut n {
            *slot = it.next()?.parse().ok()?;
        }
        if it.next().is_some() {
            return None;
        }
        Some(Self {
            source_sha256,
            rect: PixelRect {
                x: n[0],
                y: n[1],
                w: n[2],
                h: n[3],
            },
        })
    }
}

/// Cuts `rect` out of `source` and encodes it as PNG with a provenance chunk.
pub fn crop_png(source: &LoadedImage, rect: PixelRect) -> Result<Vec<u8>, GroundError> {
    let img = source.decoded()?;
    let (iw, ih) = img.dimensions();
    if rect.w == 0 || rect.h == 0 || rect.x.saturating_add(rect.w) > iw || rect.y.saturating_add(rect.h) > ih {
        return Err(GroundError::CropTooSmall { w: rect.w, h: rect.h });
    }
    let crop = img.crop_imm(rect.x, rect.y, rect.w, rect.h).to_rgb8();
    let provenance = CropProvenance {
        source_sha256: sha256_hex(&source.bytes),
        rect,
    };
    let encode_err = |e: png::EncodingError| GroundError::ImageDecode(e.to_string());
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, rect.w, rect.h);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.add_text_chunk(CROP_PROVENANCE_KEY.to_string(), provenance.render())
        .map_err(encode_err)?;
    let mut writer = enc.write_header().map_err(encode_err)?;
    writer.write_image_data(crop.as_raw()).map_err(encode_err)?;
    writer.finish().map_err(encode_err)?;
    Ok(out)
}

/// Reads the provenance chunk of a crop made by [`crop_png`].
pub fn parse_crop_provenance(png_bytes: &[u8]) -> Option<CropProvenance> {
    let decoder = png::Decoder::new(Cursor::new(png_bytes));
    let reader = decoder.read_info().ok()?;
    reader
        .info()
        .uncompressed_latin1_text
        .iter()
        .find(|c| c.keyword == CROP_PROVENANCE_KEY)
        .and_then(|c| CropProvenance::parse(&c.text))
}

/// Compares what was read inside a crop with the target it should show.
pub fn check_consistency(target: &Target, read_content: &str) -> Verdict {
    let content = read_content.trim();
    if content.is_empty() {
        return Verdict::Unreadable;
    }
    let ok = match target.kind {
        TargetKind::Number => match (parse_decimal(&target.surface), parse_decimal(content)) {
            (Some(a), Some(b)) => relative_eq(a, b, NUMBER_TOLERANCE),
            _ => false,
        },
        TargetKind::Noun => {
            let want = word_tokens(&target.surface);
            let got = word_tokens(content);
            !want.is_empty()
                && (got.windows(want.len()).any(|w| w == want.as_slice())
                    || edit_similarity(&want.join(" "), &got.join(" ")) >= NOUN_SIMILARITY)
        }
    };
    if ok {
        Verdict::Match
    } else {
        Verdict::Mismatch
    }
}

#[derive(Debug, Clone)]
pub struct Grounder {
    gateway: Gateway,
    model: String,
    pad_frac: f64,
}

impl Grounder {
    pub fn new(gateway: Gateway, model: impl Into<String>) -> Self {
        Self {
            gateway,
            model: model.into(),
            pad_frac: DEFAULT_PAD_FRAC,
        }
    }

    pub fn with_pad_frac(mut self, pad_frac: f64) -> Self {
        self.pad_frac = pad_frac;
        self
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn request_box(&self, subq: &SubQuestion, image: &LoadedImage) -> Result<NBox, GroundError> {
        let request = ChatRequest::user(&self.model, grounding_prompt(subq), Some(image.payload()));
        let completion = self.gateway.complete(&request)?;
        parse_box_completion(&completion)
    }

    pub fn read_crop(&self, rect: PixelRect, image: &LoadedImage) -> Result<String, GroundError> {
        let crop = crop_png(image, rect)?;
        let request = ChatRequest::user(&self.model, READ_PROMPT, Some(("image/png".to_string(), crop)));
        Ok(self.gateway.complete(&request)?)
    }

    /// Crop-read-match for a box that is already known.
    pub fn verify_box(&self, target: &Target, bbox: &NBox, image: &LoadedImage) -> (Verdict, String, Option<String>) {
        let rect = match to_pixel_rect(bbox, image.image.width_px, image.image.height_px, self.pad_frac) {
            Ok(r) => r,
            Err(e) => return (Verdict::Mismatch, String::new(), Some(e.to_string())),
        };
        match self.read_crop(rect, image) {
            Ok(content) => (check_consistency(target, &content), content, None),
            Err(e) => (Verdict::Unreadable, String::new(), Some(e.to_string())),
        }
    }

    /// Full self-verification of one sub-question. Failures become verdicts.
    pub fn ground_one(&self, sample_id: &str, subq: &SubQuestion, image: &LoadedImage, iteration: u32) -> VerifiedBox {
        let mut vb = VerifiedBox {
            sample_id: sample_id.to_string(),
            sub_question: subq.clone(),
            bbox: None,
            read_content: String::new(),
            verdict: Verdict::Unreadable,
            iteration,
            failure: None,
        };
        match self.request_box(subq, image) {
            Ok(bbox) => {
                let (verdict, content, failure) = self.verify_box(&subq.target, &bbox, image);
                vb.bbox = Some(bbox);
                vb.verdict = verdict;
                vb.read_content = content;
                vb.failure = failure;
            }
            Err(e) => vb.failure = Some(e.to_string()),
        }
        vb
    }
}
