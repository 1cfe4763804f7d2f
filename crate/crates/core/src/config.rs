//! Pipeline configuration file (TOML).
//!
//! `${NAME}` anywhere in the file is replaced by the environment variable
//! `NAME` before parsing; `$${` yields a literal `${`. Relative paths are
//! resolved against the directory holding the config file.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::Adapter;
use crate::eval::{AnswerMode, DEFAULT_SEEDS, DEFAULT_SIZES};
use crate::gateway::BackendProfile;
use crate::grounder::DEFAULT_PAD_FRAC;
use crate::model::TrainingManifest;
use crate::synth::OraclePolicy;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("environment variable {0} is not set")]
    MissingEnv(String),
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub run_dir: PathBuf,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub oracle: OraclePolicy,
    #[serde(default)]
    pub models: ModelsConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub bootstrap: BootstrapSection,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_adapter")]
    pub adapter: Adapter,
    /// Defaults to the synth manifest inside the run directory.
    #[serde(default)]
    pub path: Option<PathBuf>,
}

fn default_adapter() -> Adapter {
    Adapter::Synth
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            adapter: default_adapter(),
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_images")]
    pub n_images: usize,
    #[serde(default = "default_items")]
    pub items_per_image: usize,
}

fn default_seed() -> u64 {
    7
}
fn default_images() -> usize {
    64
}
fn default_items() -> usize {
    4
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            n_images: default_images(),
            items_per_image: default_items(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    /// Scripted oracle over the synth world in `data`.
    #[default]
    Oracle,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default)]
    pub kind: BackendKind,
    /// Required for `kind = "http"`.
    #[serde(default)]
    pub profile: Option<BackendProfile>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Oracle,
            profile: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelsConfig {
    /// Third-party model used for distillation.
    #[serde(default = "default_teacher")]
    pub distill: String,
    /// Base model that the bootstrap loop fine-tunes.
    #[serde(default = "default_base")]
    pub base: String,
    /// Model that generates GCoT candidates; defaults to the model trained
    /// on the assembled GCoT set.
    #[serde(default)]
    pub generate: Option<String>,
}

fn default_teacher() -> String {
    "teacher".into()
}
fn default_base() -> String {
    "base".into()
}

impl Default for ModelsConfig {
    fn default() -> Self {
        Self {
            distill: default_teacher(),
            base: default_base(),
            generate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Keep only CoTs whose parsed answer matches gold.
    #[serde(default = "default_true")]
    pub require_correct_answer: bool,
}

fn default_max_tokens() -> u32 {
    crate::gateway::DEFAULT_MAX_TOKENS
}
fn default_true() -> bool {
    true
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            max_tokens: default_max_tokens(),
            require_correct_answer: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSection {
    #[serde(default = "default_iterations")]
    pub max_iterations: u32,
    #[serde(default = "default_pad")]
    pub pad_frac: f64,
    /// `"noop"` or a command line run as `<command> <manifest_path>`.
    #[serde(default = "default_trainer")]
    pub trainer: String,
    #[serde(default = "default_rank")]
    pub lora_rank: u32,
    #[serde(default = "default_alpha")]
    pub lora_alpha: u32,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: u32,
}

fn default_iterations() -> u32 {
    crate::bootstrap::DEFAULT_MAX_ITERATIONS
}
fn default_pad() -> f64 {
    DEFAULT_PAD_FRAC
}
fn default_trainer() -> String {
    "noop".into()
}
fn default_rank() -> u32 {
    TrainingManifest::DEFAULT_LORA_RANK
}
fn default_alpha() -> u32 {
    TrainingManifest::DEFAULT_LORA_ALPHA
}
fn default_lr() -> f64 {
    TrainingManifest::DEFAULT_LEARNING_RATE
}
fn default_epochs() -> u32 {
    TrainingManifest::DEFAULT_EPOCHS
}

impl Default for BootstrapSection {
    fn default() -> Self {
        Self {
            max_iterations: default_iterations(),
            pad_frac: default_pad(),
            trainer: default_trainer(),
            lora_rank: default_rank(),
            lora_alpha: default_alpha(),
            learning_rate: default_lr(),
            epochs: default_epochs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default = "default_candidates")]
    pub candidates: usize,
    #[serde(default = "default_keep")]
    pub max_keep: usize,
}

fn default_candidates() -> usize {
    crate::assembler::DEFAULT_CANDIDATES
}
fn default_keep() -> usize {
    crate::assembler::DEFAULT_MAX_KEEP
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            candidates: default_candidates(),
            max_keep: default_keep(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
    #[serde(default = "default_eval_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub mode: AnswerMode,
    /// JSONL of `{sample_id, prediction}`; predictions come from the
    /// backend when absent.
    #[serde(default)]
    pub predictions: Option<PathBuf>,
}

fn default_sizes() -> Vec<usize> {
    DEFAULT_SIZES.to_vec()
}
fn default_eval_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            sizes: default_sizes(),
            seeds: default_eval_seeds(),
            mode: AnswerMode::Exact,
            predictions: None,
        }
    }
}

fn env_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\$\$\{|\$\{([A-Za-z_][A-Za-z0-9_]*)\}").unwrap())
}

/// Replaces `${NAME}` using `lookup`; `$${` escapes a literal `${`.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, ConfigError> {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for c in env_re().captures_iter(text) {
        let m = c.get(0).unwrap();
        out.push_str(&text[last..m.start()]);
        match c.get(1) {
            Some(name) => {
                out.push_str(&lookup(name.as_str()).ok_or_else(|| ConfigError::MissingEnv(name.as_str().into()))?)
            }
            None => out.push_str("${"),
        }
        last = m.end();
    }
    out.push_str(&text[last..]);
    Ok(out)
}

impl Config {
    /// A config with every default, writing into `run_dir`.
    pub fn with_run_dir(run_dir: impl Into<PathBuf>) -> Self {
        Self {
            run_dir: run_dir.into(),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
            backend: BackendConfig::default(),
            oracle: OraclePolicy::default(),
            models: ModelsConfig::default(),
            distill: DistillConfig::default(),
            bootstrap: BootstrapSection::default(),
            augment: AugmentConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Parses config text after environment interpolation. Paths stay as written.
    pub fn parse(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let text = interpolate(text, lookup)?;
        let cfg: Config = toml::from_str(&text).map_err(|e| ConfigError::Parse(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, interpolates from the process environment, and resolves
    /// relative paths against the config's directory. Also returns the raw text.
    pub fn load(path: &Path) -> Result<(Self, String), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::parse(&text, |k| std::env::var(k).ok())?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok((cfg, text))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.run_dir);
        if let Some(p) = self.data.path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.eval.predictions.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.oracle
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.backend.kind == BackendKind::Http && self.backend.profile.is_none() {
            return bad("backend.kind = \"http\" needs a [backend.profile] table".into());
        }
        if let Some(p) = &self.backend.profile {
            if p.max_in_flight == 0 {
                return bad("backend.profile.max_in_flight must be at least 1".into());
            }
            if p.timeout_s.is_nan() || p.timeout_s <= 0.0 || !p.backoff_base_s.is_finite() || p.backoff_base_s < 0.0 {
                return bad("backend.profile timeout and backoff must be positive".into());
            }
        }
        if !(0.0..=crate::grounder::MAX_PAD_FRAC).contains(&self.bootstrap.pad_frac) {
            return bad(format!(
                "bootstrap.pad_frac {} outside [0, 0.1]",
                self.bootstrap.pad_frac
            ));
        }
        if self.bootstrap.trainer.trim().is_empty() {
            return bad("bootstrap.trainer is empty".into());
        }
        if self.augment.candidates == 0 {
            return bad("augment.candidates must be at least 1".into());
        }
        if self.eval.sizes.is_empty() || self.eval.seeds.is_empty() {
            return bad("eval.sizes and eval.seeds must be non-empty".into());
        }
        if self.synth.n_images == 0 || !(2..=crate::synth::MAX_ITEMS_PER_IMAGE).contains(&self.synth.items_per_image) {
            return bad("synth.n_images must be >= 1 and synth.items_per_image in 2..=12".into());
        }
        Ok(())
    }
}
