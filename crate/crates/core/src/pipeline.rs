//! Stage orchestration over a run directory.
//!
//! ```text
//! <run_dir>/
//!   run.lock                  held while a command runs
//!   world/                    synth images, manifest.json, samples.jsonl
//!   distill/cot.jsonl         CoTRecord per sample; failures.jsonl
//!   extract/items.jsonl       GroundingItem per kept CoT
//!   bootstrap/                state.json and per-iteration shards
//!   assemble/gcot.jsonl       assembled GCoTRecords; train.jsonl; manifest.json(.out)
//!   augment/selected.jsonl    kept self-generated GCoTRecords; selection.jsonl; train.jsonl
//!   eval/                     predictions.jsonl, report.json, report.csv, report.txt
//!   meta/<stage>.json         run metadata per stage
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::assembler::{generation_prompt, inject_boxes, AssembleError, Augmenter, SelectionOutcome};
use crate::bootstrap::{
    load_state, out_path_of, BootstrapConfig, BootstrapError, Bootstrapper, CommandTrainer, GroundingItem, NoopTrainer,
    TrainJob, Trainer, STATE_FILE,
};
use crate::config::{BackendKind, Config, ConfigError};
use crate::dataset_io::{self, Adapter, DatasetError, IoError, TrainingExample, SCHEMA_VERSION};
use crate::distiller::{parse_answer_marker, Distiller};
use crate::eval::{evaluate, render_csv, render_table, sampled_runs, EvalError};
use crate::extract::{build_sub_questions, extract_targets};
use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::grounder::{sha256_hex, GroundError, Grounder, LoadedImage};
use crate::model::{CoTRecord, EvalReport, GCoTRecord, QASample, TrainTask};
use crate::synth::{generate_world, oracle_configure, OracleError, SynthError, SynthWorld, MANIFEST_FILE};

pub const LOCK_FILE: &str = "run.lock";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("run directory is locked by another process ({})", .0.display())]
    Locked(PathBuf),
    #[error("{stage} needs {} (run the earlier stage first)", path.display())]
    MissingInput { stage: &'static str, path: PathBuf },
    #[error("the oracle backend needs synth data: {0}")]
    OracleNeedsSynth(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Bootstrap(#[from] BootstrapError),
    #[error(transparent)]
    Assemble(#[from] AssembleError),
    #[error(transparent)]
    Ground(#[from] GroundError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("trainer failed: {0}")]
    Trainer(String),
    #[error("prediction for unknown sample {0}")]
    UnknownPrediction(String),
}

impl PipelineError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::OracleNeedsSynth(_) => 2,
            PipelineError::Oracle(OracleError::InvalidPolicy(_)) => 2,
            _ => 1,
        }
    }
}

/// Exclusive claim on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(run_dir).map_err(|e| IoError::at(run_dir, e))?;
        let path = run_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(path)),
            Err(e) => Err(IoError::at(&path, e).into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Written to `meta/<stage>.json`; together with the data it names, enough
/// to repeat the stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub v: String,
    pub stage: String,
    pub config_hash: String,
    pub config: Value,
    pub seeds: BTreeMap<String, Value>,
    pub versions: BTreeMap<String, String>,
    pub outputs: Value,
}

/// One prediction line of `eval/predictions.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub prediction: String,
}

pub struct Pipeline {
    pub config: Config,
    config_hash: String,
}

fn stage_dir(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}

impl Pipeline {
    /// The config hash leaves out `run_dir`, so the same settings hash the
    /// same wherever they run.
    pub fn new(config: Config) -> Self {
        let mut value = serde_json::to_value(&config).unwrap_or(Value::Null);
        if let Some(map) = value.as_object_mut() {
            map.remove("run_dir");
        }
        let canonical = value.to_string();
        Self {
            config_hash: sha256_hex(canonical.as_bytes()),
            config,
        }
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn run_dir(&self) -> &Path {
        &self.config.run_dir
    }

    pub fn lock(&self) -> Result<RunLock, PipelineError> {
        RunLock::acquire(self.run_dir())
    }

    pub fn world_dir(&self) -> PathBuf {
        stage_dir(self.run_dir(), "world")
    }

    pub fn data_path(&self) -> PathBuf {
        match &self.config.data.path {
            Some(p) => p.clone(),
            None => self.world_dir().join(MANIFEST_FILE),
        }
    }

    fn cot_path(&self) -> PathBuf {
        stage_dir(self.run_dir(), "distill").join("cot.jsonl")
    }

    fn items_path(&self) -> PathBuf {
        stage_dir(self.run_dir(), "extract").join("items.jsonl")
    }

    pub fn bootstrap_dir(&self) -> PathBuf {
        stage_dir(self.run_dir(), "bootstrap")
    }

    fn assemble_dir(&self) -> PathBuf {
        stage_dir(self.run_dir(), "assemble")
    }

    fn augment_dir(&self) -> PathBuf {
        stage_dir(self.run_dir(), "augment")
    }

    fn eval_dir(&self) -> PathBuf {
        stage_dir(self.run_dir(), "eval")
    }

    fn require(&self, stage: &'static str, path: PathBuf) -> Result<PathBuf, PipelineError> {
        if path.exists() {
            Ok(path)
        } else {
            Err(PipelineError::MissingInput { stage, path })
        }
    }

    fn write_meta(&self, stage: &str, outputs: Value) -> Result<Value, PipelineError> {
        let c = &self.config;
        let seeds = BTreeMap::from([
            ("synth".to_string(), json!(c.synth.seed)),
            ("oracle".to_string(), json!(c.oracle.seed)),
            ("eval".to_string(), json!(c.eval.seeds)),
        ]);
        let versions = BTreeMap::from([
            ("gcot_core".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("schema".to_string(), SCHEMA_VERSION.to_string()),
        ]);
        let meta = RunMetadata {
            v: SCHEMA_VERSION.into(),
            stage: stage.into(),
            config_hash: self.config_hash.clone(),
            config: serde_json::to_value(c).unwrap_or(Value::Null),
            seeds,
            versions,
            outputs: outputs.clone(),
        };
        dataset_io::write_json(&meta, &self.run_dir().join("meta").join(format!("{stage}.json")))?;
        Ok(outputs)
    }

    pub fn samples(&self) -> Result<Vec<QASample>, PipelineError> {
        let path = self.require("reading samples", self.data_path())?;
        Ok(dataset_io::read_samples(&path, self.config.data.adapter)?)
    }

    pub fn gateway(&self) -> Result<Gateway, PipelineError> {
        match self.config.backend.kind {
            BackendKind::Http => {
                let profile = self.config.backend.profile.clone().ok_or_else(|| {
                    ConfigError::Invalid("backend.kind = \"http\" needs a [backend.profile] table".into())
                })?;
                Ok(Gateway::http(profile)?)
            }
            BackendKind::Oracle => {
                if self.config.data.adapter != Adapter::Synth {
                    return Err(PipelineError::OracleNeedsSynth(format!(
                        "data.adapter is {}",
                        self.config.data.adapter
                    )));
                }
                let path = self.require("the oracle backend", self.data_path())?;
                let world = SynthWorld::load(&path)?;
                Ok(oracle_configure(Arc::new(world), self.config.oracle.clone())?)
            }
        }
    }

    pub fn trainer(&self) -> Result<Box<dyn Trainer>, PipelineError> {
        let spec = self.config.bootstrap.trainer.trim();
        if spec == "noop" {
            return Ok(Box::new(NoopTrainer));
        }
        let t = CommandTrainer::parse(spec).ok_or_else(|| ConfigError::Invalid("bootstrap.trainer is empty".into()))?;
        Ok(Box::new(t))
    }

    fn bootstrap_config(&self) -> BootstrapConfig {
        let b = &self.config.bootstrap;
        BootstrapConfig {
            base_model: self.config.models.base.clone(),
            max_iterations: b.max_iterations,
            pad_frac: b.pad_frac,
            lora_rank: b.lora_rank,
            lora_alpha: b.lora_alpha,
            learning_rate: b.learning_rate,
            epochs: b.epochs,
        }
    }

    /// Renders the synthetic world next to the configured manifest path
    /// (`world/` by default).
    pub fn synth(&self) -> Result<Value, PipelineError> {
        let s = &self.config.synth;
        let manifest = self.data_path();
        let dir = manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| self.world_dir());
        let world = generate_world(s.seed, s.n_images, s.items_per_image)?.materialize(&dir)?;
        self.write_meta(
            "synth",
            json!({"images": world.images.len(), "samples": world.qa.len(), "manifest": dir.join(MANIFEST_FILE)}),
        )
    }

    pub fn distill(&self) -> Result<Value, PipelineError> {
        let samples = self.samples()?;
        let gateway = self.gateway()?;
        let distiller = Distiller::new(gateway, &self.config.models.distill)
            .with_max_tokens(self.config.distill.max_tokens)
            .with_answer_mode(self.config.eval.mode);
        let out = distiller.distill(&samples);
        dataset_io::write_records(&out.records, &self.cot_path())?;
        dataset_io::write_records(&out.failures, &self.cot_path().with_file_name("failures.jsonl"))?;
        let correct = out.records.iter().filter(|r| r.answer_ok).count();
        self.write_meta(
            "distill",
            json!({"records": out.records.len(), "answer_ok": correct, "failures": out.failures.len()}),
        )
    }

    fn kept_cots(&self, stage: &'static str) -> Result<Vec<CoTRecord>, PipelineError> {
        let path = self.require(stage, self.cot_path())?;
        let records: Vec<CoTRecord> = dataset_io::read_records(&path)?;
        let strict = self.config.distill.require_correct_answer;
        Ok(records.into_iter().filter(|r| r.answer_ok || !strict).collect())
    }

    pub fn extract(&self) -> Result<Value, PipelineError> {
        let cots = self.kept_cots("extract")?;
        let samples: HashMap<String, QASample> =
            self.samples()?.into_iter().map(|s| (s.sample_id.clone(), s)).collect();
        let mut items = Vec::with_capacity(cots.len());
        for cot in &cots {
            let Some(sample) = samples.get(&cot.sample_id) else {
                log::warn!("CoT for unknown sample {} skipped", cot.sample_id);
                continue;
            };
            items.push(GroundingItem {
                sample_id: cot.sample_id.clone(),
                image: sample.image.clone(),
                sub_questions: build_sub_questions(&extract_targets(&cot.cot_text)),
            });
        }
        dataset_io::write_records(&items, &self.items_path())?;
        let targets: usize = items.iter().map(|i| i.sub_questions.len()).sum();
        self.write_meta("extract", json!({"items": items.len(), "targets": targets}))
    }

    pub fn grounding_items(&self) -> Result<Vec<GroundingItem>, PipelineError> {
        let path = self.require("bootstrap", self.items_path())?;
        Ok(dataset_io::read_records(&path)?)
    }

    pub fn bootstrap_with(&self, trainer: &dyn Trainer) -> Result<Value, PipelineError> {
        let items = self.grounding_items()?;
        let runner = Bootstrapper {
            dir: self.bootstrap_dir(),
            config: self.bootstrap_config(),
            gateway: self.gateway()?,
            trainer,
        };
        let (state, _) = runner.run(&items)?;
        let targets: usize = items.iter().map(|i| i.sub_questions.len()).sum();
        self.write_meta(
            "bootstrap",
            json!({
                "iteration": state.iteration,
                "counts_per_iteration": state.counts_per_iteration,
                "targets": targets,
                "model_ref": state.model_ref,
            }),
        )
    }

    pub fn bootstrap(&self) -> Result<Value, PipelineError> {
        let trainer = self.trainer()?;
        self.bootstrap_with(trainer.as_ref())
    }

    pub fn assemble_with(&self, trainer: &dyn Trainer) -> Result<Value, PipelineError> {
        let cots = self.kept_cots("assemble")?;
        self.require("assemble", self.bootstrap_dir().join(STATE_FILE))?;
        let (state, _) = load_state(&self.bootstrap_dir(), &self.config.models.base)?;
        let mut gcots = Vec::with_capacity(cots.len());
        for cot in &cots {
            let verified = state.verified.get(&cot.sample_id).map(Vec::as_slice).unwrap_or(&[]);
            gcots.push(inject_boxes(cot, verified)?);
        }
        let dir = self.assemble_dir();
        dataset_io::write_records(&gcots, &dir.join("gcot.jsonl"))?;
        let samples: HashMap<String, QASample> =
            self.samples()?.into_iter().map(|s| (s.sample_id.clone(), s)).collect();
        let train = training_examples(&samples, gcots.iter());
        let train_path = dir.join("train.jsonl");
        dataset_io::write_records(&train, &train_path)?;
        let manifest = self.bootstrap_config().manifest(TrainTask::Gcot, train_path);
        let manifest_path = dir.join("manifest.json");
        dataset_io::write_json(&manifest, &manifest_path)?;
        let model = trainer
            .train(&TrainJob {
                manifest_path,
                manifest,
                iteration: 0,
            })
            .map_err(PipelineError::Trainer)?;
        let boxes: usize = gcots.iter().map(|g| g.boxes.len()).sum();
        self.write_meta(
            "assemble",
            json!({"records": gcots.len(), "boxes": boxes, "train_examples": train.len(), "model": model}),
        )
    }

    pub fn assemble(&self) -> Result<Value, PipelineError> {
        let trainer = self.trainer()?;
        self.assemble_with(trainer.as_ref())
    }

    /// Model used for candidate generation and prediction.
    pub fn generation_model(&self) -> Result<String, PipelineError> {
        if let Some(m) = &self.config.models.generate {
            return Ok(m.clone());
        }
        let out = self.require("generation", out_path_of(&self.assemble_dir().join("manifest.json")))?;
        let text = std::fs::read_to_string(&out).map_err(|e| IoError::at(&out, e))?;
        Ok(text.trim().to_string())
    }

    pub fn augment(&self) -> Result<Value, PipelineError> {
        let samples = self.samples()?;
        let model = self.generation_model()?;
        let gateway = self.gateway()?;
        let grounder = Grounder::new(gateway.clone(), &model).with_pad_frac(self.config.bootstrap.pad_frac);
        let augmenter = Augmenter::new(gateway, &model, grounder)
            .with_candidates(self.config.augment.candidates)
            .with_max_keep(self.config.augment.max_keep)
            .with_answer_mode(self.config.eval.mode);
        let outcomes: Vec<SelectionOutcome> = samples
            .par_iter()
            .filter_map(|s| match augmenter.augment_one(s) {
                Ok(o) => Some(o),
                Err(e) => {
                    log::warn!("augment skipped {}: {e}", s.sample_id);
                    None
                }
            })
            .collect();
        let selected: Vec<GCoTRecord> = outcomes.iter().flat_map(|o| o.kept.iter().cloned()).collect();
        let dir = self.augment_dir();
        dataset_io::write_records(&selected, &dir.join("selected.jsonl"))?;
        dataset_io::write_records(&outcomes, &dir.join("selection.jsonl"))?;

        let assembled_path = self.assemble_dir().join("gcot.jsonl");
        let assembled: Vec<GCoTRecord> = if assembled_path.exists() {
            dataset_io::read_records(&assembled_path)?
        } else {
            Vec::new()
        };
        let by_id: HashMap<String, QASample> = samples.into_iter().map(|s| (s.sample_id.clone(), s)).collect();
        let train = training_examples(&by_id, assembled.iter().chain(&selected));
        dataset_io::write_records(&train, &dir.join("train.jsonl"))?;
        let shortfall: usize = outcomes.iter().map(|o| o.shortfall).sum();
        self.write_meta(
            "augment",
            json!({
                "model": model,
                "candidates_per_sample": self.config.augment.candidates,
                "max_keep": self.config.augment.max_keep,
                "samples": outcomes.len(),
                "selected": selected.len(),
                "shortfall": shortfall,
                "train_examples": train.len(),
            }),
        )
    }

    fn predict(&self, samples: &[QASample]) -> Result<Vec<Prediction>, PipelineError> {
        let model = self.generation_model()?;
        let gateway = self.gateway()?;
        samples
            .par_iter()
            .map(|s| {
                let image = LoadedImage::load(&s.image)?;
                let request = ChatRequest::user(&model, generation_prompt(&s.question), Some(image.payload()));
                let text = gateway.complete(&request)?;
                let prediction = parse_answer_marker(&text)
                    .map(|p| p.preferred().to_string())
                    .unwrap_or_default();
                Ok(Prediction {
                    sample_id: s.sample_id.clone(),
                    prediction,
                })
            })
            .collect()
    }

    pub fn eval(&self) -> Result<Vec<EvalReport>, PipelineError> {
        let samples = self.samples()?;
        let predictions = match &self.config.eval.predictions {
            Some(p) => dataset_io::read_records::<Prediction>(&self.require("eval", p.clone())?)?,
            None => self.predict(&samples)?,
        };
        let golds: HashMap<&str, &str> = samples
            .iter()
            .map(|s| (s.sample_id.as_str(), s.gold_answer.as_str()))
            .collect();
        let mut pool = Vec::with_capacity(predictions.len());
        for p in &predictions {
            let gold = golds
                .get(p.sample_id.as_str())
                .ok_or_else(|| PipelineError::UnknownPrediction(p.sample_id.clone()))?;
            pool.push((p.prediction.clone(), gold.to_string()));
        }
        let runs = sampled_runs(&pool, &self.config.eval.sizes, &self.config.eval.seeds)?;
        let reports = evaluate(&runs, self.config.eval.mode)?;
        let dir = self.eval_dir();
        dataset_io::write_records(&predictions, &dir.join("predictions.jsonl"))?;
        dataset_io::write_json(&reports, &dir.join("report.json"))?;
        dataset_io::write_atomic(&dir.join("report.csv"), render_csv(&reports).as_bytes())?;
        dataset_io::write_atomic(&dir.join("report.txt"), render_table(&reports).as_bytes())?;
        self.write_meta(
            "eval",
            json!({"mode": self.config.eval.mode, "sizes": self.config.eval.sizes, "predictions": predictions.len(), "reports": reports}),
        )?;
        Ok(reports)
    }

    /// Every stage in order; `synth` runs only when the data lives in the run directory.
    pub fn run_all(&self) -> Result<Vec<EvalReport>, PipelineError> {
        if self.config.data.adapter == Adapter::Synth && self.config.data.path.is_none() {
            self.synth()?;
        }
        let trainer = self.trainer()?;
        self.distill()?;
        self.extract()?;
        self.bootstrap_with(trainer.as_ref())?;
        self.assemble_with(trainer.as_ref())?;
        self.augment()?;
        self.eval()
    }
}

/// Instruction-tuning pairs for answer-correct GCoTs whose sample is known.
fn training_examples<'a>(
    samples: &HashMap<String, QASample>,
    records: impl Iterator<Item = &'a GCoTRecord>,
) -> Vec<TrainingExample> {
    records
        .filter(|g| g.answer_ok)
        .filter_map(|g| {
            samples
                .get(&g.sample_id)
                .map(|s| dataset_io::gcot_training_example(s, g))
        })
        .collect()
}
