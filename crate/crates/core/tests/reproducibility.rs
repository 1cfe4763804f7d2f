mod common;

use std::collections::BTreeMap;
use std::path::Path;

use gcot_core::config::Config;
use gcot_core::pipeline::Pipeline;
use gcot_core::synth::{CandidateScript, OraclePolicy};

fn noisy(seed: u64) -> OraclePolicy {
    OraclePolicy {
        recall_schedule: vec![0.5, 0.8],
        box_jitter_rate: 0.2,
        wrong_content_rate: 0.1,
        factual_error_rate: 0.25,
        candidate_script: vec![
            CandidateScript::Correct,
            CandidateScript::BadBox,
            CandidateScript::WrongAnswer,
        ],
        seed,
    }
}

fn config(dir: &Path, policy: OraclePolicy) -> Config {
    let mut c = Config::with_run_dir(dir.to_path_buf());
    c.synth.n_images = 6;
    c.oracle = policy;
    c.bootstrap.max_iterations = 2;
    c.eval.sizes = vec![4, 8];
    c
}

/// Every file under `root`, keyed by relative path, with `root` itself masked.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mask = root.display().to_string();
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(root).unwrap().display().to_string();
            let bytes = std::fs::read(&path).unwrap();
            let bytes = match String::from_utf8(bytes) {
                Ok(text) => text.replace(&mask, "<run>").into_bytes(),
                Err(e) => e.into_bytes(),
            };
            out.insert(rel, bytes);
        }
    }
    out
}

#[test]
fn run_all_is_bit_for_bit_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = Pipeline::new(config(a.path(), noisy(4))).run_all().unwrap();
    let rb = Pipeline::new(config(b.path(), noisy(4))).run_all().unwrap();
    assert_eq!(ra, rb);
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert_eq!(sa.keys().collect::<Vec<_>>(), sb.keys().collect::<Vec<_>>());
    for (k, v) in &sa {
        assert!(
            v == &sb[k],
            "{k} differs:\n{}\n{}",
            String::from_utf8_lossy(v),
            String::from_utf8_lossy(&sb[k])
        );
    }
    assert!(sa.contains_key("meta/eval.json"));
    assert!(sa.keys().any(|k| k.ends_with(".png")));
}

#[test]
fn policy_seed_changes_the_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pa = Pipeline::new(config(a.path(), noisy(1)));
    let pb = Pipeline::new(config(b.path(), noisy(2)));
    pa.run_all().unwrap();
    pb.run_all().unwrap();
    let attempts = |root: &Path| std::fs::read(root.join("bootstrap/attempts-0001.jsonl")).unwrap();
    assert_ne!(attempts(a.path()), attempts(b.path()));
    assert_ne!(pa.config_hash(), pb.config_hash());
}

#[test]
fn factual_errors_survive_distillation_but_never_ground() {
    let dir = tempfile::tempdir().unwrap();
    let mut policy = noisy(3);
    policy.factual_error_rate = 1.0;
    policy.recall_schedule = vec![1.0];
    policy.box_jitter_rate = 0.0;
    policy.wrong_content_rate = 0.0;
    let (p, items) = common::prepared_run(dir.path(), 3, 4, policy);
    assert_eq!(items.len(), 6, "the final answer is still right, so every CoT is kept");
    p.bootstrap().unwrap();
    let (state, _) = gcot_core::bootstrap::load_state(&p.bootstrap_dir(), "base").unwrap();
    let targets: usize = items.iter().map(|i| i.sub_questions.len()).sum();
    assert_eq!(targets, 24);
    // the invented price is not in the table, so it is refused in every iteration
    assert_eq!(state.counts_per_iteration, vec![18, 18, 18]);
    for boxes in state.verified.values() {
        assert_eq!(
            boxes.iter().map(|b| b.sub_question.index_t).collect::<Vec<_>>(),
            vec![1, 2, 3]
        );
    }
}

#[test]
fn config_hash_ignores_run_dir() {
    let a = Pipeline::new(config(Path::new("/x"), noisy(1)));
    let b = Pipeline::new(config(Path::new("/y"), noisy(1)));
    assert_eq!(a.config_hash(), b.config_hash());
}
