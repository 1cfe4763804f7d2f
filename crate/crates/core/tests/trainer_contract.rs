mod common;

use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};

use common::{prepared_run, script};
use gcot_core::bootstrap::{
    load_state, BootstrapConfig, BootstrapError, Bootstrapper, CommandTrainer, GroundingItem, NoopTrainer, TrainJob,
    Trainer, STATE_FILE,
};
use gcot_core::dataset_io::{self, TrainingExample};
use gcot_core::model::{TrainTask, TrainingManifest};
use gcot_core::pipeline::Pipeline;
use gcot_core::synth::OraclePolicy;

fn perfect() -> OraclePolicy {
    OraclePolicy::default()
}

fn runner<'a>(p: &Pipeline, dir: &Path, iterations: u32, trainer: &'a dyn Trainer) -> Bootstrapper<'a> {
    let mut config = BootstrapConfig::new("base");
    config.max_iterations = iterations;
    Bootstrapper {
        dir: dir.to_path_buf(),
        config,
        gateway: p.gateway().unwrap(),
        trainer,
    }
}

fn setup() -> (tempfile::TempDir, Pipeline, Vec<GroundingItem>) {
    let dir = tempfile::tempdir().unwrap();
    let (p, items) = prepared_run(&dir.path().join("run"), 2, 2, perfect());
    (dir, p, items)
}

struct Counting(AtomicU32);

impl Trainer for Counting {
    fn train(&self, job: &TrainJob) -> Result<String, String> {
        self.0.fetch_add(1, Ordering::SeqCst);
        NoopTrainer.train(job)
    }
}

#[test]
fn zero_iterations_never_trains() {
    let (dir, p, items) = setup();
    let trainer = Counting(AtomicU32::new(0));
    let (state, reports) = runner(&p, &dir.path().join("b"), 0, &trainer).run(&items).unwrap();
    assert_eq!(trainer.0.load(Ordering::SeqCst), 0);
    assert!(reports.is_empty());
    assert_eq!(state.iteration, 0);
    assert_eq!(state.model_ref, "base");
    assert!(!dir.path().join("b").join(STATE_FILE).exists());
}

#[test]
fn command_trainer_receives_manifest_and_returns_out() {
    let (dir, p, items) = setup();
    let keep = dir.path().join("seen");
    std::fs::create_dir_all(&keep).unwrap();
    let s = script(
        dir.path(),
        "train.sh",
        &format!(
            "test -f \"$1\" || exit 9\ncp \"$1\" {keep}/$(basename \"$1\")\necho \"tiny+$(basename \"$1\" .json)\" > \"$1.out\"",
            keep = keep.display()
        ),
    );
    let trainer = CommandTrainer::parse(&s.display().to_string()).unwrap();
    let (state, _) = runner(&p, &dir.path().join("b"), 2, &trainer).run(&items).unwrap();
    assert_eq!(state.model_ref, "tiny+manifest-0002");

    let manifest: TrainingManifest = dataset_io::read_json(&keep.join("manifest-0001.json")).unwrap();
    assert_eq!(manifest.task, TrainTask::Grounding);
    assert_eq!(manifest.base_model, "base");
    assert_eq!((manifest.lora_rank, manifest.lora_alpha, manifest.epochs), (16, 32, 1));
    assert_eq!(manifest.learning_rate, 2e-4);
    let records: Vec<TrainingExample> = dataset_io::read_records(&manifest.records_uri).unwrap();
    assert_eq!(records.len(), state.counts_per_iteration[1]);
    assert!(records.iter().all(|r| r.image.exists()));
}

#[test]
fn nonzero_exit_is_trainer_failed_without_state() {
    let (dir, p, items) = setup();
    let s = script(dir.path(), "fail.sh", "echo 'out of memory' >&2\nexit 3");
    let trainer = CommandTrainer::parse(&s.display().to_string()).unwrap();
    let b = dir.path().join("b");
    match runner(&p, &b, 2, &trainer).run(&items) {
        Err(BootstrapError::TrainerFailed { iteration, message }) => {
            assert_eq!(iteration, 1);
            assert!(message.contains("exit"), "{message}");
        }
        other => panic!("{other:?}"),
    }
    assert!(!b.join(STATE_FILE).exists());
}

#[test]
fn missing_out_file_is_a_failure_even_if_stale_one_existed() {
    let (dir, p, items) = setup();
    let b = dir.path().join("b");
    std::fs::create_dir_all(&b).unwrap();
    std::fs::write(b.join("manifest-0001.json.out"), "stale\n").unwrap();
    let s = script(dir.path(), "quiet.sh", "exit 0");
    let trainer = CommandTrainer::parse(&s.display().to_string()).unwrap();
    let err = runner(&p, &b, 1, &trainer).run(&items).unwrap_err();
    assert!(
        matches!(err, BootstrapError::TrainerFailed { iteration: 1, .. }),
        "{err}"
    );
}

#[test]
fn empty_out_file_is_a_failure() {
    let (dir, p, items) = setup();
    let s = script(dir.path(), "empty.sh", ": > \"$1.out\"");
    let trainer = CommandTrainer::parse(&s.display().to_string()).unwrap();
    let err = runner(&p, &dir.path().join("b"), 1, &trainer).run(&items).unwrap_err();
    assert!(err.to_string().contains("empty"), "{err}");
}

#[test]
fn missing_program_is_a_failure() {
    let (dir, p, items) = setup();
    let trainer = CommandTrainer::parse("/nonexistent/trainer --flag").unwrap();
    let err = runner(&p, &dir.path().join("b"), 1, &trainer).run(&items).unwrap_err();
    assert!(matches!(err, BootstrapError::TrainerFailed { .. }), "{err}");
}

#[test]
fn failure_later_keeps_earlier_state() {
    struct FailSecond;
    impl Trainer for FailSecond {
        fn train(&self, job: &TrainJob) -> Result<String, String> {
            if job.iteration == 2 {
                Err("boom".into())
            } else {
                NoopTrainer.train(job)
            }
        }
    }
    let (dir, p, items) = setup();
    let b = dir.path().join("b");
    let err = runner(&p, &b, 3, &FailSecond).run(&items).unwrap_err();
    assert!(matches!(err, BootstrapError::TrainerFailed { iteration: 2, .. }));
    let (state, shards) = load_state(&b, "base").unwrap();
    assert_eq!(state.iteration, 1);
    assert_eq!(shards.len(), 1);
    assert_eq!(state.model_ref, "base+boot1");
}

#[test]
fn resume_rejects_unknown_samples() {
    let (dir, p, items) = setup();
    let b = dir.path().join("b");
    runner(&p, &b, 1, &NoopTrainer).run(&items).unwrap();
    let err = runner(&p, &b, 2, &NoopTrainer).run(&items[1..]).unwrap_err();
    assert!(matches!(err, BootstrapError::State { .. }), "{err}");
}

#[test]
fn corrupt_state_file_is_reported() {
    let (dir, p, items) = setup();
    let b = dir.path().join("b");
    std::fs::create_dir_all(&b).unwrap();
    std::fs::write(b.join(STATE_FILE), "{\"v\":\"v1\",").unwrap();
    let err = runner(&p, &b, 1, &NoopTrainer).run(&items).unwrap_err();
    assert!(matches!(err, BootstrapError::State { .. }), "{err}");
}

#[test]
fn gcot_manifest_goes_through_the_same_contract() {
    let (dir, p, _) = setup();
    let s = script(
        dir.path(),
        "gcot.sh",
        "grep -q '\"task\": *\"gcot\"' \"$1\" || exit 4\necho served-gcot > \"$1.out\"",
    );
    p.bootstrap_with(&NoopTrainer).unwrap();
    let trainer = CommandTrainer::parse(&s.display().to_string()).unwrap();
    let out = p.assemble_with(&trainer).unwrap();
    assert_eq!(out["model"], "served-gcot");
    assert_eq!(p.generation_model().unwrap(), "served-gcot");
}
