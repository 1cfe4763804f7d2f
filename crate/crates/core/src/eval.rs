//! Few-shot sampling, answer scoring, and mean ± std reporting.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::EvalReport;
use crate::normalize::{parse_decimal, relative_eq};

pub const DEFAULT_SIZES: [usize; 5] = [8, 16, 32, 64, 128];
pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

const EXACT_TOLERANCE: f64 = 1e-6;
const RELAXED_TOLERANCE: f64 = 5e-2;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EvalError {
    #[error("requested {requested} samples but only {available} are available")]
    NotEnoughSamples { requested: usize, available: usize },
    #[error("{predictions} predictions for {golds} gold answers")]
    LengthMismatch { predictions: usize, golds: usize },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerMode {
    /// Numbers equal within 1e-6.
    #[default]
    Exact,
    /// Numbers equal within 5% relative error.
    Relaxed,
}

/// Draws `n` items uniformly without replacement; the draw depends only on
/// `seed`, `n` and `items.len()`.
pub fn sample_fewshot<T: Clone>(items: &[T], n: usize, seed: u64) -> Result<Vec<T>, EvalError> {
    Ok(sample_indices(items.len(), n, seed)?
        .into_iter()
        .map(|i| items[i].clone())
        .collect())
}

pub fn sample_indices(len: usize, n: usize, seed: u64) -> Result<Vec<usize>, EvalError> {
    if n > len {
        return Err(EvalError::NotEnoughSamples {
            requested: n,
            available: len,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, len, n).into_vec())
}

fn normalize_answer(s: &str) -> String {
    let folded = s.trim().to_lowercase();
    let chars: Vec<char> = folded.chars().collect();
    let mut out = String::with_capacity(folded.len());
    for (i, &c) in chars.iter().enumerate() {
        if matches!(c, '$' | '€' | '£' | '¥') {
            continue;
        }
        let between_digits =
            c == ',' && i > 0 && chars[i - 1].is_ascii_digit() && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit());
        if between_digits {
            continue;
        }
        out.push(c);
    }
    let out = out.split_whitespace().collect::<Vec<_>>().join(" ");
    out.strip_suffix('.').map(str::to_string).unwrap_or(out)
}

pub fn answers_equivalent(predicted: &str, gold: &str, mode: AnswerMode) -> bool {
    let (p, g) = (normalize_answer(predicted), normalize_answer(gold));
    match (parse_decimal(&p), parse_decimal(&g)) {
        (Some(a), Some(b)) => match mode {
            AnswerMode::Exact => (a - b).abs() <= EXACT_TOLERANCE * a.abs().max(b.abs()).max(1.0),
            AnswerMode::Relaxed => relative_eq(a, b, RELAXED_TOLERANCE),
        },
        _ => p == g,
    }
}

/// Percentage of aligned pairs that agree.
pub fn accuracy(predictions: &[String], golds: &[String], mode: AnswerMode) -> Result<f64, EvalError> {
    if predictions.len() != golds.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    if golds.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| answers_equivalent(p, g, mode))
        .count();
    Ok(100.0 * hits as f64 / golds.len() as f64)
}

/// Predictions of one (size, seed) run, aligned with their gold answers.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRun {
    pub sample_size: usize,
    pub seed: u64,
    pub predictions: Vec<String>,
    pub golds: Vec<String>,
}

/// One report per sample size, sizes ascending, seeds in run order.
pub fn evaluate(runs: &[EvalRun], mode: AnswerMode) -> Result<Vec<EvalReport>, EvalError> {
    let mut by_size: BTreeMap<usize, (Vec<u64>, Vec<f64>)> = BTreeMap::new();
    for run in runs {
        let acc = accuracy(&run.predictions, &run.golds, mode)?;
        let entry = by_size.entry(run.sample_size).or_default();
        entry.0.push(run.seed);
        entry.1.push(acc);
    }
    Ok(by_size
        .into_iter()
        .map(|(size, (seeds, accs))| EvalReport::from_runs(size, seeds, accs))
        .collect())
}

/// Builds one run per (size, seed) by drawing `size` pairs from `pool`.
pub fn sampled_runs(pool: &[(String, String)], sizes: &[usize], seeds: &[u64]) -> Result<Vec<EvalRun>, EvalError> {
    let mut runs = Vec::with_capacity(sizes.len() * seeds.len());
    for &size in sizes {
        for &seed in seeds {
            let drawn = sample_fewshot(pool, size, seed)?;
            let (predictions, golds) = drawn.into_iter().unzip();
            runs.push(EvalRun {
                sample_size: size,
                seed,
                predictions,
                golds,
            });
        }
    }
    Ok(runs)
}

pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>6}  {:<24}  {:>16}",
        "size", "per-seed accuracy (%)", "mean ± std"
    );
    for r in reports {
        let per: Vec<String> = r.per_seed_accuracy.iter().map(|a| format!("{a:.2}")).collect();
        let _ = writeln!(
            out,
            "{:>6}  {:<24}  {:>16}",
            r.sample_size,
            per.join(" "),
            format!("{:.2} ± {:.2}", r.mean, r.std)
        );
    }
    out
}

pub fn render_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("sample_size,seed,accuracy\n");
    for r in reports {
        for (seed, acc) in r.seeds.iter().zip(&r.per_seed_accuracy) {
            let _ = writeln!(out, "{},{},{}", r.sample_size, seed, acc);
        }
    }
    out
}
