//! Synthetic price tables with known cell boxes, and the scripted oracle
//! that answers pipeline prompts from them.
//!
//! Each image is a two-column table (item name, price) rendered with the
//! bundled bitmap font, so every cell box is exact. Questions ask for the
//! combined price of two items; gold answers are computed in integer cents.

pub mod font;
pub mod oracle;

use std::collections::HashMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{ImageFormat, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::{self, GenericSample, IoError};
use crate::grounder::sha256_hex;
use crate::model::{DatasetTag, ImageRef, ModelError, NBox, QASample};

pub use oracle::{oracle_configure, CandidateScript, OracleError, OraclePolicy, ScriptedOracle};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const IMAGES_DIR: &str = "images";
pub const MAX_ITEMS_PER_IMAGE: usize = 12;
/// Minimum normalized separation between any two cell boxes.
pub const MIN_CELL_GAP: f64 = 0.05;

const SCALE: u32 = 2;
const WIDTH: u32 = 480;
const NAME_X: u32 = 24;
const PRICE_X: u32 = 300;
const TOP: u32 = 24;
const CELL_MARGIN: u32 = 3;

const ADJECTIVES: &[&str] = &[
    "red", "blue", "green", "orange", "yellow", "purple", "pink", "white", "black", "brown", "silver", "golden",
    "amber", "coral", "ivory", "violet",
];
const NOUNS: &[&str] = &[
    "sponge", "starfish", "pebble", "feather", "ribbon", "candle", "marble", "button", "kite", "lantern", "teapot",
    "whistle", "compass", "thimble", "scarf", "mitten", "basket", "bucket", "cushion", "saucer",
];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("image encoding failed: {0}")]
    Image(String),
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Name,
    Price,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub id: String,
    pub text: String,
    pub kind: CellKind,
    pub row: usize,
    #[serde(rename = "box")]
    pub bbox: NBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub image: ImageRef,
    pub sha256: String,
    pub cells: Vec<Cell>,
    pub png: Vec<u8>,
}

impl SynthImage {
    pub fn cell(&self, kind: CellKind, row: usize) -> Option<&Cell> {
        self.cells.iter().find(|c| c.kind == kind && c.row == row)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthQa {
    pub sample: QASample,
    pub image_index: usize,
    pub rows: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub seed: u64,
    pub images: Vec<SynthImage>,
    pub qa: Vec<SynthQa>,
}

fn format_cents(cents: u32) -> String {
    format!("{}.{:02}", cents / 100, cents % 100)
}

fn row_gap(items: u32) -> u32 {
    let n = items as f64;
    let cell_h = (font::text_height(SCALE) + 2 * CELL_MARGIN) as f64;
    let fixed = (2 * TOP) as f64;
    // smallest g with g >= MIN_CELL_GAP * (fixed + n*cell_h + (n-1)*g), plus slack
    let g = MIN_CELL_GAP * (fixed + n * cell_h) / (1.0 - MIN_CELL_GAP * (n - 1.0));
    g.ceil() as u32 + 2
}

/// Renders `n_images` tables of `items_per_image` rows each.
pub fn generate_world(seed: u64, n_images: usize, items_per_image: usize) -> Result<SynthWorld, SynthError> {
    if n_images == 0 {
        return Err(SynthError::InvalidSpec("n_images must be at least 1".into()));
    }
    if !(2..=MAX_ITEMS_PER_IMAGE).contains(&items_per_image) {
        return Err(SynthError::InvalidSpec(format!(
            "items_per_image must be in 2..={MAX_ITEMS_PER_IMAGE}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = items_per_image as u32;
    let cell_h = font::text_height(SCALE) + 2 * CELL_MARGIN;
    let gap = row_gap(n);
    let height = 2 * TOP + n * cell_h + (n - 1) * gap;
    let mut images = Vec::with_capacity(n_images);
    let mut qa = Vec::new();

    for idx in 0..n_images {
        let id = format!("img-{idx:04}");
        let mut adjectives = ADJECTIVES.to_vec();
        let mut nouns = NOUNS.to_vec();
        adjectives.shuffle(&mut rng);
        nouns.shuffle(&mut rng);
        let mut cents: Vec<u32> = Vec::with_capacity(items_per_image);
        while cents.len() < items_per_image {
            let c = rng.random_range(10..1000);
            if !cents.contains(&c) {
                cents.push(c);
            }
        }

        let mut canvas = RgbImage::from_pixel(WIDTH, height, Rgb([255, 255, 255]));
        let mut cells = Vec::with_capacity(2 * items_per_image);
        for row in 0..items_per_image {
            let name = format!("{} {}", adjectives[row], nouns[row]);
            let price = format!("${}", format_cents(cents[row]));
            let y = TOP + row as u32 * (cell_h + gap);
            for (kind, text, x) in [(CellKind::Name, &name, NAME_X), (CellKind::Price, &price, PRICE_X)] {
                font::draw_text(text, x, y + CELL_MARGIN, SCALE, |px, py| {
                    canvas.put_pixel(px, py, Rgb([0, 0, 0]));
                });
                let right = x + font::text_width(text, SCALE) + CELL_MARGIN;
                let bbox = NBox::new(
                    (x - CELL_MARGIN) as f64 / WIDTH as f64,
                    y as f64 / height as f64,
                    right as f64 / WIDTH as f64,
                    (y + cell_h) as f64 / height as f64,
                )?;
                let tag = match kind {
                    CellKind::Name => "name",
                    CellKind::Price => "price",
                };
                cells.push(Cell {
                    id: format!("{id}/{tag}-{row:02}"),
                    text: text.clone(),
                    kind,
                    row,
                    bbox,
                });
            }
        }

        let mut png = Vec::new();
        canvas
            .write_to(&mut Cursor::new(&mut png), ImageFormat::Png)
            .map_err(|e| SynthError::Image(e.to_string()))?;
        let image = ImageRef::new(&id, Path::new(IMAGES_DIR).join(format!("{id}.png")), WIDTH, height)?;

        for pair in 0..items_per_image / 2 {
            let rows = [2 * pair, 2 * pair + 1];
            let [a, b] = rows.map(|r| format!("{} {}", adjectives[r], nouns[r]));
            let gold = format_cents(cents[rows[0]] + cents[rows[1]]);
            let sample = QASample::new(
                format!("synth-{seed}-{idx:04}-{pair}"),
                image.clone(),
                format!("How much do {a} and {b} cost together?"),
                gold,
                DatasetTag::Synth,
            )?;
            qa.push(SynthQa {
                sample,
                image_index: idx,
                rows,
            });
        }

        images.push(SynthImage {
            sha256: sha256_hex(&png),
            image,
            cells,
            png,
        });
    }
    Ok(SynthWorld { seed, images, qa })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestImage {
    id: String,
    file: PathBuf,
    width_px: u32,
    height_px: u32,
    sha256: String,
    cells: Vec<Cell>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestQa {
    sample_id: String,
    image_id: String,
    question: String,
    answer: String,
    rows: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    v: String,
    seed: u64,
    images: Vec<ManifestImage>,
    qa: Vec<ManifestQa>,
}

impl SynthWorld {
    pub fn samples(&self) -> Vec<QASample> {
        self.qa.iter().map(|q| q.sample.clone()).collect()
    }

    /// Writes images, `manifest.json`, and `samples.jsonl` under `dir`, and
    /// returns the world with image paths pointing into `dir`.
    pub fn materialize(mut self, dir: &Path) -> Result<SynthWorld, SynthError> {
        let images_dir = dir.join(IMAGES_DIR);
        std::fs::create_dir_all(&images_dir).map_err(|e| IoError::at(&images_dir, e))?;
        let mut manifest = Manifest {
            v: dataset_io::SCHEMA_VERSION.to_string(),
            seed: self.seed,
            images: Vec::new(),
            qa: Vec::new(),
        };
        let mut generic = Vec::with_capacity(self.qa.len());
        for img in &self.images {
            let rel = Path::new(IMAGES_DIR).join(format!("{}.png", img.image.id));
            dataset_io::write_atomic(&dir.join(&rel), &img.png)?;
            manifest.images.push(ManifestImage {
                id: img.image.id.clone(),
                file: rel,
                width_px: img.image.width_px,
                height_px: img.image.height_px,
                sha256: img.sha256.clone(),
                cells: img.cells.clone(),
            });
        }
        for q in &self.qa {
            let image = &self.images[q.image_index].image;
            manifest.qa.push(ManifestQa {
                sample_id: q.sample.sample_id.clone(),
                image_id: image.id.clone(),
                question: q.sample.question.clone(),
                answer: q.sample.gold_answer.clone(),
                rows: q.rows,
            });
            generic.push(GenericSample {
                sample_id: q.sample.sample_id.clone(),
                image: Path::new(IMAGES_DIR).join(format!("{}.png", image.id)),
                question: q.sample.question.clone(),
                answer: q.sample.gold_answer.clone(),
                dataset: Some(DatasetTag::Synth),
            });
        }
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| SynthError::Manifest(e.to_string()))?;
        dataset_io::write_atomic(&dir.join(MANIFEST_FILE), format!("{json}\n").as_bytes())?;
        dataset_io::write_records(&generic, &dir.join(SAMPLES_FILE))?;

        for img in &mut self.images {
            img.image.uri = dir.join(&img.image.uri);
        }
        for q in &mut self.qa {
            q.sample.image = self.images[q.image_index].image.clone();
        }
        Ok(self)
    }

    /// Loads a world written by [`SynthWorld::materialize`].
    pub fn load(manifest_path: &Path) -> Result<SynthWorld, SynthError> {
        let text = std::fs::read_to_string(manifest_path).map_err(|e| IoError::at(manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| SynthError::Manifest(e.to_string()))?;
        if manifest.v != dataset_io::SCHEMA_VERSION {
            return Err(SynthError::Manifest(format!(
                "unsupported schema version {:?}",
                manifest.v
            )));
        }
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let mut images = Vec::with_capacity(manifest.images.len());
        let mut index = HashMap::new();
        for m in manifest.images {
            let path = root.join(&m.file);
            let png = std::fs::read(&path).map_err(|e| IoError::at(&path, e))?;
            let digest = sha256_hex(&png);
            if digest != m.sha256 {
                return Err(SynthError::Manifest(format!(
                    "{} does not match its recorded digest",
                    m.id
                )));
            }
            index.insert(m.id.clone(), images.len());
            images.push(SynthImage {
                image: ImageRef::new(m.id, path, m.width_px, m.height_px)?,
                sha256: digest,
                cells: m.cells,
                png,
            });
        }
        let mut qa = Vec::with_capacity(manifest.qa.len());
        for q in manifest.qa {
            let &image_index = index
                .get(&q.image_id)
                .ok_or_else(|| SynthError::Manifest(format!("unknown image {}", q.image_id)))?;
            let image = images[image_index].image.clone();
            let sample = QASample::new(q.sample_id, image, q.question, q.answer, DatasetTag::Synth)?;
            qa.push(SynthQa {
                sample,
                image_index,
                rows: q.rows,
            });
        }
        Ok(SynthWorld {
            seed: manifest.seed,
            images,
            qa,
        })
    }
}

/// Normalized separation of two boxes: 0 when they touch or overlap.
pub fn box_gap(a: &NBox, b: &NBox) -> f64 {
    let dx = (b.x1 - a.x2).max(a.x1 - b.x2);
    let dy = (b.y1 - a.y2).max(a.y1 - b.y2);
    dx.max(dy).max(0.0)
}
