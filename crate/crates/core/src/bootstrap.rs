//! The ground / verify / train loop.
//!
//! Each iteration grounds every sub-question that has no matching box yet,
//! merges new matches into the cumulative verified set, writes shards, and
//! hands a grounding manifest to the trainer. `state.json` is rewritten
//! atomically only after the trainer succeeds, so an interrupted run resumes
//! from the last completed iteration.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::{self, DatasetError, IoError, TrainingExample, SCHEMA_VERSION};
use crate::gateway::Gateway;
use crate::grounder::{Grounder, LoadedImage};
use crate::model::{ImageRef, SubQuestion, TrainTask, TrainingManifest, Verdict, VerifiedBox};

pub const STATE_FILE: &str = "state.json";
pub const DEFAULT_MAX_ITERATIONS: u32 = 3;
const STAGE_SUFFIX: &str = "+boot";

#[derive(Debug, Error)]
pub enum BootstrapError {
    #[error("trainer failed at iteration {iteration}: {message}")]
    TrainerFailed { iteration: u32, message: String },
    #[error("bad state file {}: {message}", path.display())]
    State { path: PathBuf, message: String },
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Model identifier of the adapter trained in iteration `k` from `base`.
pub fn trained_model_name(base: &str, k: u32) -> String {
    format!("{base}{STAGE_SUFFIX}{k}")
}

/// Iteration encoded in a model name by [`trained_model_name`]; 0 otherwise.
pub fn model_stage(model: &str) -> u32 {
    model
        .rfind(STAGE_SUFFIX)
        .and_then(|i| model[i + STAGE_SUFFIX.len()..].parse().ok())
        .unwrap_or(0)
}

/// Everything needed to ground one sample's targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingItem {
    pub sample_id: String,
    pub image: ImageRef,
    pub sub_questions: Vec<SubQuestion>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BootstrapState {
    pub iteration: u32,
    /// Match-verdict boxes only, sorted by `index_t`.
    pub verified: BTreeMap<String, Vec<VerifiedBox>>,
    pub counts_per_iteration: Vec<usize>,
    pub model_ref: String,
}

impl BootstrapState {
    pub fn new(base_model: impl Into<String>) -> Self {
        Self {
            model_ref: base_model.into(),
            ..Self::default()
        }
    }

    pub fn verified_count(&self) -> usize {
        self.verified.values().map(Vec::len).sum()
    }

    fn is_matched(&self, sample_id: &str, index_t: usize) -> bool {
        self.verified
            .get(sample_id)
            .is_some_and(|v| v.iter().any(|b| b.sub_question.index_t == index_t))
    }

    fn all_verified(&self) -> Vec<VerifiedBox> {
        self.verified.values().flatten().cloned().collect()
    }
}

/// Files written by one iteration, relative to the bootstrap directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IterationShards {
    pub iteration: u32,
    pub verified: PathBuf,
    pub attempts: PathBuf,
    pub grounding: PathBuf,
    pub manifest: PathBuf,
}

impl IterationShards {
    fn for_iteration(k: u32) -> Self {
        Self {
            iteration: k,
            verified: format!("verified-{k:04}.jsonl").into(),
            attempts: format!("attempts-{k:04}.jsonl").into(),
            grounding: format!("grounding-{k:04}.jsonl").into(),
            manifest: format!("manifest-{k:04}.json").into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFile {
    pub v: String,
    pub iteration: u32,
    pub counts_per_iteration: Vec<usize>,
    pub model_ref: String,
    pub base_model: String,
    pub shards: Vec<IterationShards>,
}

pub fn parse_state_file(text: &str) -> Result<StateFile, String> {
    let s: StateFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if s.v != SCHEMA_VERSION {
        return Err(format!("unsupported schema version {:?}", s.v));
    }
    if s.counts_per_iteration.len() != s.iteration as usize || s.shards.len() != s.iteration as usize {
        return Err("iteration does not match the recorded counts and shards".into());
    }
    if s.counts_per_iteration.windows(2).any(|w| w[0] > w[1]) {
        return Err("counts_per_iteration decreases".into());
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainJob {
    pub manifest_path: PathBuf,
    pub manifest: TrainingManifest,
    pub iteration: u32,
}

impl TrainJob {
    pub fn out_path(&self) -> PathBuf {
        out_path_of(&self.manifest_path)
    }
}

/// `<manifest_path>.out`, where a trainer writes the new model identifier.
pub fn out_path_of(manifest_path: &Path) -> PathBuf {
    let mut s = manifest_path.as_os_str().to_owned();
    s.push(".out");
    PathBuf::from(s)
}

pub trait Trainer: Send + Sync {
    /// Trains on `job` and returns the identifier of the resulting model.
    fn train(&self, job: &TrainJob) -> Result<String, String>;
}

/// Stand-in trainer for the scripted oracle: names the model after the
/// iteration so the oracle advances its recall schedule.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoopTrainer;

impl Trainer for NoopTrainer {
    fn train(&self, job: &TrainJob) -> Result<String, String> {
        let base = &job.manifest.base_model;
        let model = match job.manifest.task {
            TrainTask::Grounding => trained_model_name(base, job.iteration),
            TrainTask::Gcot => format!("{base}+gcot"),
        };
        dataset_io::write_atomic(&job.out_path(), format!("{model}\n").as_bytes()).map_err(|e| e.to_string())?;
        Ok(model)
    }
}

/// Runs `<program> [args..] <manifest_path>` and reads `<manifest_path>.out`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandTrainer {
    pub program: String,
    pub args: Vec<String>,
}

impl CommandTrainer {
    /// Splits a command line on whitespace; no shell quoting is applied.
    pub fn parse(command: &str) -> Option<Self> {
        let mut parts = command.split_whitespace().map(str::to_string);
        Some(Self {
            program: parts.next()?,
            args: parts.collect(),
        })
    }
}

impl Trainer for CommandTrainer {
    fn train(&self, job: &TrainJob) -> Result<String, String> {
        let out = job.out_path();
        let _ = std::fs::remove_file(&out);
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg(&job.manifest_path)
            .status()
            .map_err(|e| format!("cannot run {}: {e}", self.program))?;
        if !status.success() {
            return Err(format!("{} exited with {status}", self.program));
        }
        let model = std::fs::read_to_string(&out).map_err(|e| format!("{}: {e}", out.display()))?;
        let model = model.trim();
        if model.is_empty() {
            return Err(format!("{} is empty", out.display()));
        }
        Ok(model.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapConfig {
    pub base_model: String,
    pub max_iterations: u32,
    pub pad_frac: f64,
    pub lora_rank: u32,
    pub lora_alpha: u32,
    pub learning_rate: f64,
    pub epochs: u32,
}

impl BootstrapConfig {
    pub fn new(base_model: impl Into<String>) -> Self {
        Self {
            base_model: base_model.into(),
            max_iterations: DEFAULT_MAX_ITERATIONS,
            pad_frac: crate::grounder::DEFAULT_PAD_FRAC,
            lora_rank: TrainingManifest::DEFAULT_LORA_RANK,
            lora_alpha: TrainingManifest::DEFAULT_LORA_ALPHA,
            learning_rate: TrainingManifest::DEFAULT_LEARNING_RATE,
            epochs: TrainingManifest::DEFAULT_EPOCHS,
        }
    }

    pub fn manifest(&self, task: TrainTask, records: PathBuf) -> TrainingManifest {
        TrainingManifest {
            lora_rank: self.lora_rank,
            lora_alpha: self.lora_alpha,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            ..TrainingManifest::new(task, records, &self.base_model)
        }
    }
}

/// What one iteration did, including every grounding attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub iteration: u32,
    pub model: String,
    pub attempts: Vec<VerifiedBox>,
    pub new_matches: usize,
    pub count: usize,
}

/// Reads `dir/state.json` and the verified shard it names, or returns a
/// fresh state when there is no state file.
pub fn load_state(dir: &Path, base_model: &str) -> Result<(BootstrapState, Vec<IterationShards>), BootstrapError> {
    let path = dir.join(STATE_FILE);
    if !path.exists() {
        return Ok((BootstrapState::new(base_model), Vec::new()));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| IoError::at(&path, e))?;
    let file = parse_state_file(&text).map_err(|message| BootstrapError::State {
        path: path.clone(),
        message,
    })?;
    let mut state = BootstrapState {
        iteration: file.iteration,
        verified: BTreeMap::new(),
        counts_per_iteration: file.counts_per_iteration,
        model_ref: file.model_ref,
    };
    if let Some(last) = file.shards.last() {
        let boxes: Vec<VerifiedBox> = dataset_io::read_records(&dir.join(&last.verified))?;
        for b in boxes {
            state.verified.entry(b.sample_id.clone()).or_default().push(b);
        }
    }
    if state.verified_count() != state.counts_per_iteration.last().copied().unwrap_or(0) {
        return Err(BootstrapError::State {
            path,
            message: "verified shard does not match the last count".into(),
        });
    }
    Ok((state, file.shards))
}

/// Owns the bootstrap directory and its state file.
pub struct Bootstrapper<'a> {
    pub dir: PathBuf,
    pub config: BootstrapConfig,
    pub gateway: Gateway,
    pub trainer: &'a dyn Trainer,
}

impl Bootstrapper<'_> {
    pub fn state_path(&self) -> PathBuf {
        self.dir.join(STATE_FILE)
    }

    pub fn load_state(&self) -> Result<(BootstrapState, Vec<IterationShards>), BootstrapError> {
        load_state(&self.dir, &self.config.base_model)
    }

    fn save_state(&self, state: &BootstrapState, shards: &[IterationShards]) -> Result<(), BootstrapError> {
        let file = StateFile {
            v: SCHEMA_VERSION.to_string(),
            iteration: state.iteration,
            counts_per_iteration: state.counts_per_iteration.clone(),
            model_ref: state.model_ref.clone(),
            base_model: self.config.base_model.clone(),
            shards: shards.to_vec(),
        };
        Ok(dataset_io::write_json(&file, &self.state_path())?)
    }

    /// Grounds every unmatched sub-question with the current model.
    fn ground(&self, state: &BootstrapState, items: &[GroundingItem], k: u32) -> Vec<VerifiedBox> {
        let grounder = Grounder::new(self.gateway.clone(), &state.model_ref).with_pad_frac(self.config.pad_frac);
        let per_item: Vec<Vec<VerifiedBox>> = items
            .par_iter()
            .map(|item| {
                let pending: Vec<&SubQuestion> = item
                    .sub_questions
                    .iter()
                    .filter(|sq| !state.is_matched(&item.sample_id, sq.index_t))
                    .collect();
                if pending.is_empty() {
                    return Vec::new();
                }
                let image = match LoadedImage::load(&item.image) {
                    Ok(img) => img,
                    Err(e) => {
                        log::warn!("{}: {e}", item.sample_id);
                        return pending
                            .into_iter()
                            .map(|sq| VerifiedBox {
                                sample_id: item.sample_id.clone(),
                                sub_question: sq.clone(),
                                bbox: None,
                                read_content: String::new(),
                                verdict: Verdict::Unreadable,
                                iteration: k,
                                failure: Some(e.to_string()),
                            })
                            .collect();
                    }
                };
                pending
                    .par_iter()
                    .map(|sq| grounder.ground_one(&item.sample_id, sq, &image, k))
                    .collect()
            })
            .collect();
        per_item.into_iter().flatten().collect()
    }

    /// One full iteration. Persists state only once the trainer succeeds.
    pub fn run_iteration(
        &self,
        state: &mut BootstrapState,
        shards: &mut Vec<IterationShards>,
        items: &[GroundingItem],
    ) -> Result<IterationReport, BootstrapError> {
        let k = state.iteration + 1;
        let model = state.model_ref.clone();
        let attempts = self.ground(state, items, k);

        let mut next = state.clone();
        let mut new_matches = 0;
        for vb in attempts
            .iter()
            .filter(|b| b.verdict == Verdict::Match && b.bbox.is_some())
        {
            next.verified.entry(vb.sample_id.clone()).or_default().push(vb.clone());
            new_matches += 1;
        }
        for boxes in next.verified.values_mut() {
            boxes.sort_by_key(|b| b.sub_question.index_t);
        }
        let count = next.verified_count();
        log::info!("iteration {k}: {new_matches} new matches, {count} verified in total");

        let files = IterationShards::for_iteration(k);
        std::fs::create_dir_all(&self.dir).map_err(|e| IoError::at(&self.dir, e))?;
        let all = next.all_verified();
        dataset_io::write_records(&all, &self.dir.join(&files.verified))?;
        dataset_io::write_records(&attempts, &self.dir.join(&files.attempts))?;
        let images: BTreeMap<&str, &Path> = items
            .iter()
            .map(|i| (i.sample_id.as_str(), i.image.uri.as_path()))
            .collect();
        let training: Vec<TrainingExample> = all
            .iter()
            .filter_map(|vb| dataset_io::grounding_training_example(images.get(vb.sample_id.as_str())?, vb))
            .collect();
        let grounding_path = self.dir.join(&files.grounding);
        dataset_io::write_records(&training, &grounding_path)?;
        let manifest = self.config.manifest(TrainTask::Grounding, grounding_path);
        let manifest_path = self.dir.join(&files.manifest);
        dataset_io::write_json(&manifest, &manifest_path)?;

        let job = TrainJob {
            manifest_path,
            manifest,
            iteration: k,
        };
        let trained = self
            .trainer
            .train(&job)
            .map_err(|message| BootstrapError::TrainerFailed { iteration: k, message })?;

        next.iteration = k;
        next.counts_per_iteration.push(count);
        next.model_ref = trained;
        shards.push(files);
        self.save_state(&next, shards)?;
        *state = next;
        Ok(IterationReport {
            iteration: k,
            model,
            attempts,
            new_matches,
            count,
        })
    }

    /// Resumes from the state file (if any) and runs up to `max_iterations`.
    pub fn run(&self, items: &[GroundingItem]) -> Result<(BootstrapState, Vec<IterationReport>), BootstrapError> {
        let (mut state, mut shards) = self.load_state()?;
        let ids: BTreeSet<&str> = items.iter().map(|i| i.sample_id.as_str()).collect();
        if let Some(stray) = state.verified.keys().find(|k| !ids.contains(k.as_str())) {
            return Err(BootstrapError::State {
                path: self.state_path(),
                message: format!("state refers to unknown sample {stray}"),
            });
        }
        let mut reports = Vec::new();
        while state.iteration < self.config.max_iterations {
            reports.push(self.run_iteration(&mut state, &mut shards, items)?);
        }
        Ok((state, reports))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        assert_eq!(trained_model_name("qwen", 2), "qwen+boot2");
        assert_eq!(model_stage("qwen+boot2"), 2);
        assert_eq!(model_stage("qwen"), 0);
        assert_eq!(model_stage("qwen+bootx"), 0);
        assert_eq!(model_stage(&trained_model_name("a+boot1", 3)), 3);
    }

    #[test]
    fn out_path_appends_suffix() {
        assert_eq!(
            out_path_of(Path::new("/r/manifest-0001.json")),
            PathBuf::from("/r/manifest-0001.json.out")
        );
    }

    #[test]
    fn state_file_validation() {
        let ok = r#"{"v":"v1","iteration":1,"counts_per_iteration":[3],"model_ref":"m+boot1","base_model":"m",
            "shards":[{"iteration":1,"verified":"v","attempts":"a","grounding":"g","manifest":"m"}]}"#;
        assert!(parse_state_file(ok).is_ok());
        assert!(parse_state_file(&ok.replace("\"v1\"", "\"v9\"")).is_err());
        assert!(parse_state_file(&ok.replace("[3]", "[3,4]")).is_err());
        assert!(parse_state_file("{}").is_err());
    }

    #[test]
    fn command_parsing() {
        let t = CommandTrainer::parse("python train.py --fast").unwrap();
        assert_eq!(t.program, "python");
        assert_eq!(t.args, vec!["train.py", "--fast"]);
        assert!(CommandTrainer::parse("  ").is_none());
    }
}
