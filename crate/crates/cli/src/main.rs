//! `gcot-forge`: run the grounded chain-of-thought pipeline stage by stage.
//!
//! Exit status: 0 on success, 1 on data errors, 2 on config or usage errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gcot_core::config::Config;
use gcot_core::dataset_io::Adapter;
use gcot_core::eval::AnswerMode;
use gcot_core::pipeline::{Pipeline, PipelineError};

const DEFAULT_RUN_DIR: &str = "gcot-run";

#[derive(Debug, Parser)]
#[command(name = "gcot-forge", version, about = "Grounded chain-of-thought data pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config; `${VAR}` is read from the environment.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (overrides `run_dir`).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Dataset path (overrides `data.path`).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Dataset adapter (overrides `data.adapter`).
    #[arg(long, global = true)]
    adapter: Option<Adapter>,
    /// Oracle policy seed (overrides `oracle.seed`).
    #[arg(long, global = true)]
    oracle_seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Render a synthetic price-table world.
    Synth {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        items: Option<usize>,
        /// Directory for images and manifest.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ask the teacher model for a chain of thought per sample.
    Distill {
        #[arg(long)]
        model: Option<String>,
    },
    /// Extract targets and sub-questions from the kept CoTs.
    Extract,
    /// Ground, verify and retrain for the configured number of iterations.
    Bootstrap {
        #[arg(long)]
        iterations: Option<u32>,
        /// `noop` or a command run as `<cmd> <manifest_path>`.
        #[arg(long)]
        trainer: Option<String>,
    },
    /// Inject verified boxes into the CoTs and train the GCoT model.
    Assemble {
        #[arg(long)]
        trainer: Option<String>,
    },
    /// Generate, verify and select self-generated GCoTs.
    Augment {
        #[arg(long)]
        candidates: Option<usize>,
        #[arg(long)]
        max_keep: Option<usize>,
        #[arg(long)]
        model: Option<String>,
    },
    /// Score predictions over sample sizes and seeds.
    Eval {
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Every stage in order.
    RunAll {
        #[arg(long)]
        iterations: Option<u32>,
        #[command(flatten)]
        eval: EvalArgs,
    },
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<AnswerMode>,
    /// JSONL of `{sample_id, prediction}` instead of querying the backend.
    #[arg(long)]
    predictions: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<AnswerMode, String> {
    match s {
        "exact" => Ok(AnswerMode::Exact),
        "relaxed" => Ok(AnswerMode::Relaxed),
        _ => Err(format!("unknown mode {s:?} (exact|relaxed)")),
    }
}

impl EvalArgs {
    fn apply(self, cfg: &mut Config) {
        if let Some(v) = self.sizes {
            cfg.eval.sizes = v;
        }
        if let Some(v) = self.seeds {
            cfg.eval.seeds = v;
        }
        if let Some(v) = self.mode {
            cfg.eval.mode = v;
        }
        if let Some(v) = self.predictions {
            cfg.eval.predictions = Some(v);
        }
    }
}

fn build_config(common: Common, command: &mut Cmd) -> Result<Config, PipelineError> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?.0,
        None => {
            let fallback = match command {
                Cmd::Synth { out: Some(out), .. } => out.clone(),
                _ => PathBuf::from(DEFAULT_RUN_DIR),
            };
            Config::with_run_dir(fallback)
        }
    };
    if let Some(v) = common.run_dir {
        cfg.run_dir = v;
    }
    if let Some(v) = common.data {
        cfg.data.path = Some(v);
    }
    if let Some(v) = common.adapter {
        cfg.data.adapter = v;
    }
    if let Some(v) = common.oracle_seed {
        cfg.oracle.seed = v;
    }
    match command {
        Cmd::Synth {
            seed,
            images,
            items,
            out,
        } => {
            if let Some(v) = seed {
                cfg.synth.seed = *v;
            }
            if let Some(v) = images {
                cfg.synth.n_images = *v;
            }
            if let Some(v) = items {
                cfg.synth.items_per_image = *v;
            }
            if let Some(out) = out {
                cfg.data.adapter = Adapter::Synth;
                cfg.data.path = Some(out.join(gcot_core::synth::MANIFEST_FILE));
            }
        }
        Cmd::Distill { model } => {
            if let Some(v) = model.take() {
                cfg.models.distill = v;
            }
        }
        Cmd::Extract => {}
        Cmd::Bootstrap { iterations, trainer } => {
            if let Some(v) = iterations {
                cfg.bootstrap.max_iterations = *v;
            }
            if let Some(v) = trainer.take() {
                cfg.bootstrap.trainer = v;
            }
        }
        Cmd::Assemble { trainer } => {
            if let Some(v) = trainer.take() {
                cfg.bootstrap.trainer = v;
            }
        }
        Cmd::Augment {
            candidates,
            max_keep,
            model,
        } => {
            if let Some(v) = candidates {
                cfg.augment.candidates = *v;
            }
            if let Some(v) = max_keep {
                cfg.augment.max_keep = *v;
            }
            if let Some(v) = model.take() {
                cfg.models.generate = Some(v);
            }
        }
        Cmd::Eval { eval } => take_eval(eval).apply(&mut cfg),
        Cmd::RunAll { iterations, eval } => {
            if let Some(v) = iterations {
                cfg.bootstrap.max_iterations = *v;
            }
            take_eval(eval).apply(&mut cfg);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn take_eval(e: &mut EvalArgs) -> EvalArgs {
    EvalArgs {
        sizes: e.sizes.take(),
        seeds: e.seeds.take(),
        mode: e.mode.take(),
        predictions: e.predictions.take(),
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).unwrap_or_default());
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let Cli { common, mut command } = cli;
    let cfg = build_config(common, &mut command)?;
    let pipeline = Pipeline::new(cfg);
    let _lock = pipeline.lock()?;
    match command {
        Cmd::Synth { .. } => print_json(&pipeline.synth()?),
        Cmd::Distill { .. } => print_json(&pipeline.distill()?),
        Cmd::Extract => print_json(&pipeline.extract()?),
        Cmd::Bootstrap { .. } => print_json(&pipeline.bootstrap()?),
        Cmd::Assemble { .. } => print_json(&pipeline.assemble()?),
        Cmd::Augment { .. } => print_json(&pipeline.augment()?),
        Cmd::Eval { .. } | Cmd::RunAll { .. } => {
            let reports = if matches!(command, Cmd::Eval { .. }) {
                pipeline.eval()?
            } else {
                pipeline.run_all()?
            };
            for r in &reports {
                println!("{}", serde_json::to_string(r).unwrap_or_default());
            }
            eprint!("{}", gcot_core::eval::render_table(&reports));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
