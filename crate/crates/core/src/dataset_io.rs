//! On-disk formats.
//!
//! Every record kind is stored as JSONL: one UTF-8 JSON object per line,
//! newline-terminated, each carrying `"v": "v1"`. Writes go to a temporary
//! file in the target directory and are renamed into place. Field-level
//! schemas are documented in `docs/schemas.md`.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{DatasetTag, GCoTRecord, ImageRef, ModelError, QASample, VerifiedBox};
use crate::synth::{SynthError, SynthWorld};

pub const SCHEMA_VERSION: &str = "v1";

#[derive(Debug, Error)]
#[error("{}: {source}", path.display())]
pub struct IoError {
    pub path: PathBuf,
    #[source]
    pub source: std::io::Error,
}

impl IoError {
    pub fn at(path: &Path, source: std::io::Error) -> Self {
        Self {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{}:{line}: {message}", path.display())]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}:{line}: image {} is missing or unreadable", path.display(), image.display())]
    MissingImage { path: PathBuf, line: usize, image: PathBuf },
    #[error(transparent)]
    Synth(#[from] Box<SynthError>),
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| IoError::at(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| IoError::at(dir, e))?;
    tmp.write_all(bytes).map_err(|e| IoError::at(path, e))?;
    tmp.as_file().sync_all().map_err(|e| IoError::at(path, e))?;
    tmp.persist(path).map_err(|e| IoError::at(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| IoError::at(path, e.into()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::at(path, e))?;
    serde_json::from_str(&text).map_err(|e| DatasetError::Schema {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Serializes one record as a JSONL line (without the newline).
pub fn render_record_line<T: Serialize>(record: &T) -> Result<String, serde_json::Error> {
    let mut obj = serde_json::Map::new();
    obj.insert("v".into(), Value::String(SCHEMA_VERSION.into()));
    match serde_json::to_value(record)? {
        Value::Object(fields) => obj.extend(fields),
        other => {
            obj.insert("value".into(), other);
        }
    }
    serde_json::to_string(&Value::Object(obj))
}

/// Parses one JSONL line; a missing `"v"` is read as the current version.
pub fn parse_record_line<T: DeserializeOwned>(line: &str) -> Result<T, String> {
    let mut v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let obj = v.as_object_mut().ok_or("line is not a JSON object")?;
    match obj.remove("v") {
        None => {}
        Some(Value::String(s)) if s == SCHEMA_VERSION => {}
        Some(other) => return Err(format!("unsupported schema version {other}")),
    }
    serde_json::from_value(v).map_err(|e| e.to_string())
}

/// Writes one line per record and returns the count.
pub fn write_records<T: Serialize>(records: &[T], path: &Path) -> Result<usize, IoError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&render_record_line(r).map_err(|e| IoError::at(path, e.into()))?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())?;
    Ok(records.len())
}

pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::at(path, e))?;
    parse_records(&text).map_err(|(line, message)| DatasetError::Schema {
        path: path.to_path_buf(),
        line,
        message,
    })
}

/// Parses JSONL text; errors carry the 1-based line number.
pub fn parse_records<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, (usize, String)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_record_line(l).map_err(|e| (i + 1, e)))
        .collect()
}

/// The pipeline's own sample schema; `image` is relative to the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenericSample {
    pub sample_id: String,
    pub image: PathBuf,
    pub question: String,
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetTag>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adapter {
    Chartqa,
    Tabmwp,
    Sroie,
    Dvqa,
    Tatqa,
    Synth,
    Generic,
}

impl FromStr for Adapter {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(Value::String(s.to_lowercase())).map_err(|_| format!("unknown adapter {s:?}"))
    }
}

impl fmt::Display for Adapter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).unwrap();
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

struct SourceCtx<'a> {
    path: &'a Path,
}

impl SourceCtx<'_> {
    fn schema(&self, line: usize, message: impl Into<String>) -> DatasetError {
        DatasetError::Schema {
            path: self.path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    fn image(&self, line: usize, id: &str, file: PathBuf) -> Result<ImageRef, DatasetError> {
        let missing = || DatasetError::MissingImage {
            path: self.path.to_path_buf(),
            line,
            image: file.clone(),
        };
        let (w, h) = image::image_dimensions(&file).map_err(|_| missing())?;
        ImageRef::new(id, file.clone(), w, h).map_err(|_| missing())
    }

    fn sample(
        &self,
        line: usize,
        sample_id: String,
        image: ImageRef,
        question: String,
        answer: String,
        tag: DatasetTag,
    ) -> Result<QASample, DatasetError> {
        QASample::new(sample_id, image, question, answer, tag).map_err(|e: ModelError| self.schema(line, e.to_string()))
    }

    fn json(&self) -> Result<Value, DatasetError> {
        let text = std::fs::read_to_string(self.path).map_err(|e| IoError::at(self.path, e))?;
        serde_json::from_str(&text).map_err(|e| self.schema(e.line(), e.to_string()))
    }
}

fn root_of(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn answer_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Array(items) => {
            let parts: Option<Vec<String>> = items.iter().map(answer_text).collect();
            parts.map(|p| p.join(", "))
        }
        _ => None,
    }
}

fn str_field<'a>(ctx: &SourceCtx, line: usize, v: &'a Value, key: &str) -> Result<&'a str, DatasetError> {
    v.get(key)
        .and_then(Value::as_str)
        .ok_or_else(|| ctx.schema(line, format!("missing string field {key:?}")))
}

/// Reads a dataset into [`QASample`]s.
///
/// | adapter | `path` points at | images resolved from |
/// |---|---|---|
/// | generic | pipeline JSONL | `image` relative to the file |
/// | synth | `manifest.json` | manifest |
/// | chartqa | JSON array of `{imgname, query, label}` | `png/` next to the file |
/// | dvqa | JSON array of `{image, question, answer}` | `images/` next to the file |
/// | tabmwp | JSON object `id -> {question, answer}` | `tables/<id>.png` |
/// | tatqa | JSON array of `{table: {uid}, questions: [...]}` | `images/<table uid>.png` |
/// | sroie | directory with `entities/*.txt` and `img/*.jpg` | `img/<stem>.jpg` |
pub fn read_samples(path: &Path, adapter: Adapter) -> Result<Vec<QASample>, DatasetError> {
    let ctx = SourceCtx { path };
    let root = root_of(path);
    match adapter {
        Adapter::Generic => {
            let text = std::fs::read_to_string(path).map_err(|e| IoError::at(path, e))?;
            let mut out = Vec::new();
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let g: GenericSample = parse_record_line(line).map_err(|e| ctx.schema(i + 1, e))?;
                let file = root.join(&g.image);
                let id = g
                    .image
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| g.sample_id.clone());
                let image = ctx.image(i + 1, &id, file)?;
                let tag = g.dataset.unwrap_or(DatasetTag::Other);
                out.push(ctx.sample(i + 1, g.sample_id, image, g.question, g.answer, tag)?);
            }
            Ok(out)
        }
        Adapter::Synth => Ok(SynthWorld::load(path).map_err(Box::new)?.samples()),
        Adapter::Chartqa | Adapter::Dvqa => {
            let (tag, dir, img_key, q_key, a_key) = match adapter {
                Adapter::Chartqa => (DatasetTag::Chartqa, "png", "imgname", "query", "label"),
                _ => (DatasetTag::Dvqa, "images", "image", "question", "answer"),
            };
            let doc = ctx.json()?;
            let items = doc.as_array().ok_or_else(|| ctx.schema(1, "expected a JSON array"))?;
            let mut out = Vec::with_capacity(items.len());
            for (i, item) in items.iter().enumerate() {
                let line = i + 1;
                let img = str_field(&ctx, line, item, img_key)?;
                let question = str_field(&ctx, line, item, q_key)?;
                let answer = item
                    .get(a_key)
                    .and_then(answer_text)
                    .ok_or_else(|| ctx.schema(line, format!("missing field {a_key:?}")))?;
                let stem = Path::new(img).file_stem().map(|s| s.to_string_lossy().into_owned());
                let image = ctx.image(line, stem.as_deref().unwrap_or(img), root.join(dir).join(img))?;
                let id = match item.get("question_id") {
                    Some(q) => format!("{}-{}", tag.as_str(), answer_text(q).unwrap_or_default()),
                    None => format!("{}-{i:06}", tag.as_str()),
                };
                out.push(ctx.sample(line, id, image, question.to_string(), answer, tag)?);
            }
            Ok(out)
        }
        Adapter::Tabmwp => {
            let doc = ctx.json()?;
            let items = doc.as_object().ok_or_else(|| ctx.schema(1, "expected a JSON object"))?;
            let mut out = Vec::with_capacity(items.len());
            for (i, (pid, item)) in items.iter().enumerate() {
                let line = i + 1;
                let question = str_field(&ctx, line, item, "question")?;
                let answer = item
                    .get("answer")
                    .and_then(answer_text)
                    .ok_or_else(|| ctx.schema(line, "missing field \"answer\""))?;
                let image = ctx.image(line, pid, root.join("tables").join(format!("{pid}.png")))?;
                out.push(ctx.sample(
                    line,
                    format!("tabmwp-{pid}"),
                    image,
                    question.to_string(),
                    answer,
                    DatasetTag::Tabmwp,
                )?);
            }
            Ok(out)
        }
        Adapter::Tatqa => {
            let doc = ctx.json()?;
            let items = doc.as_array().ok_or_else(|| ctx.schema(1, "expected a JSON array"))?;
            let mut out = Vec::new();
            for (i, item) in items.iter().enumerate() {
                let line = i + 1;
                let table = item
                    .get("table")
                    .and_then(|t| t.get("uid"))
                    .and_then(Value::as_str)
                    .ok_or_else(|| ctx.schema(line, "missing table.uid"))?;
                let file = root.join("images").join(format!("{table}.png"));
                let questions = item
                    .get("questions")
                    .and_then(Value::as_array)
                    .ok_or_else(|| ctx.schema(line, "missing questions"))?;
                for q in questions {
                    let uid = str_field(&ctx, line, q, "uid")?;
                    let question = str_field(&ctx, line, q, "question")?;
                    let answer = q
                        .get("answer")
                        .and_then(answer_text)
                        .ok_or_else(|| ctx.schema(line, "missing field \"answer\""))?;
                    let image = ctx.image(line, table, file.clone())?;
                    out.push(ctx.sample(
                        line,
                        format!("tatqa-{uid}"),
                        image,
                        question.to_string(),
                        answer,
                        DatasetTag::Tatqa,
                    )?);
                }
            }
            Ok(out)
        }
        Adapter::Sroie => read_sroie(path),
    }
}

const SROIE_FIELDS: [(&str, &str); 4] = [
    ("company", "What is the name of the company on this receipt?"),
    ("date", "What is the date on this receipt?"),
    ("address", "What is the address on this receipt?"),
    ("total", "What is the total amount on this receipt?"),
];

fn read_sroie(dir: &Path) -> Result<Vec<QASample>, DatasetError> {
    let entities = dir.join("entities");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&entities)
        .map_err(|e| IoError::at(&entities, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "txt"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for file in files {
        let ctx = SourceCtx { path: &file };
        let doc = ctx.json()?;
        let stem = file.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let image = ctx.image(1, &stem, dir.join("img").join(format!("{stem}.jpg")))?;
        for (field, question) in SROIE_FIELDS {
            if let Some(answer) = doc.get(field).and_then(answer_text).filter(|a| !a.trim().is_empty()) {
                out.push(ctx.sample(
                    1,
                    format!("sroie-{stem}-{field}"),
                    image.clone(),
                    question.into(),
                    answer,
                    DatasetTag::Sroie,
                )?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: String,
    pub text: String,
}

/// Instruction-tuning record consumed by the trainer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub sample_id: String,
    pub image: PathBuf,
    pub conversation: Vec<Turn>,
}

impl TrainingExample {
    pub fn new(sample_id: &str, image: &Path, user: String, assistant: String) -> Self {
        Self {
            sample_id: sample_id.to_string(),
            image: image.to_path_buf(),
            conversation: vec![
                Turn {
                    role: "user".into(),
                    text: user,
                },
                Turn {
                    role: "assistant".into(),
                    text: assistant,
                },
            ],
        }
    }
}

pub fn gcot_training_example(sample: &QASample, record: &GCoTRecord) -> TrainingExample {
    TrainingExample::new(
        &sample.sample_id,
        &sample.image.uri,
        sample.question.clone(),
        record.gcot_text.clone(),
    )
}

/// A verified box as a grounding instruction pair. `None` for boxless entries.
pub fn grounding_training_example(image: &Path, vb: &VerifiedBox) -> Option<TrainingExample> {
    let bbox = vb.bbox?;
    Some(TrainingExample::new(
        &vb.sample_id,
        image,
        crate::grounder::grounding_prompt(&vb.sub_question),
        bbox.to_string(),
    ))
}
