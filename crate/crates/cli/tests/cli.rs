use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn forge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcot-forge"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn ok(args: &[&str]) -> Output {
    let o = forge(args);
    assert_eq!(code(&o), 0, "{args:?}\nstderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = r#"
[synth]
n_images = 8
[oracle]
recall_schedule = [0.5, 0.9]
box_jitter_rate = 0.2
seed = 5
[bootstrap]
max_iterations = 2
[eval]
sizes = [4, 8]
seeds = [1, 2, 3]
"#;

fn write_config(dir: &Path, run: &Path) -> std::path::PathBuf {
    let path = dir.join(format!("{}.toml", run.file_name().unwrap().to_str().unwrap()));
    std::fs::write(&path, format!("run_dir = {:?}\n{SMALL}", p(run))).unwrap();
    path
}

fn snapshot(root: &Path) -> BTreeMap<String, String> {
    let mask = root.display().to_string();
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                let bytes = std::fs::read(&path).unwrap();
                let text = match String::from_utf8(bytes) {
                    Ok(t) => t.replace(&mask, "<run>"),
                    Err(e) => format!("{:x?}", e.into_bytes()),
                };
                out.insert(rel, text);
            }
        }
    }
    out
}

#[test]
fn synth_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("fixtures");
    let o = ok(&["synth", "--seed", "7", "--images", "2", "--out", p(&out)]);
    assert!(out.join("manifest.json").exists());
    assert!(out.join("images/img-0001.png").exists());
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["samples"], 4);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&forge(&["frobnicate"])), 2);
    assert_eq!(code(&forge(&["synth", "--bogus"])), 2);
    assert_eq!(code(&forge(&["eval", "--mode", "fuzzy"])), 2);
    assert_eq!(code(&forge(&[])), 2);
}

#[test]
fn help_lists_every_subcommand() {
    let o = ok(&["--help"]);
    let help = String::from_utf8_lossy(&o.stdout);
    for sub in [
        "synth",
        "distill",
        "extract",
        "bootstrap",
        "assemble",
        "augment",
        "eval",
        "run-all",
    ] {
        assert!(help.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "run_dir = \"r\"\nunknown_key = 1\n").unwrap();
    assert_eq!(code(&forge(&["--config", p(&bad), "extract"])), 2);

    let env = dir.path().join("env.toml");
    std::fs::write(&env, "run_dir = \"${GCOT_CLI_TEST_UNSET}\"\n").unwrap();
    assert_eq!(code(&forge(&["--config", p(&env), "extract"])), 2);

    let policy = dir.path().join("policy.toml");
    std::fs::write(&policy, "run_dir = \"r\"\n[oracle]\nrecall_schedule = [1.5]\n").unwrap();
    assert_eq!(code(&forge(&["--config", p(&policy), "extract"])), 2);

    assert_eq!(
        code(&forge(&["--config", p(&dir.path().join("missing.toml")), "extract"])),
        2
    );
}

#[test]
fn oracle_with_non_synth_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.jsonl");
    std::fs::write(&data, "").unwrap();
    let run = dir.path().join("run");
    let o = forge(&[
        "--run-dir",
        p(&run),
        "--data",
        p(&data),
        "--adapter",
        "generic",
        "distill",
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn data_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&forge(&["--run-dir", p(&run), "distill"])), 1, "missing world");

    ok(&["--run-dir", p(&run), "synth", "--images", "2"]);
    let preds = dir.path().join("p.jsonl");
    std::fs::write(&preds, "{\"sample_id\":\"nope\",\"prediction\":\"1\"}\n").unwrap();
    let o = forge(&["--run-dir", p(&run), "eval", "--predictions", p(&preds), "--sizes", "1"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope"));
}

#[test]
fn held_lock_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join("run.lock"), "").unwrap();
    let o = forge(&["--run-dir", p(&run), "synth"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("lock"));
    assert!(!run.join("world").exists());
}

#[test]
fn run_all_equals_subcommands_in_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let all = dir.path().join("all");
    let seq = dir.path().join("seq");
    let all_cfg = write_config(dir.path(), &all);
    let seq_cfg = write_config(dir.path(), &seq);

    let all_out = ok(&["--config", p(&all_cfg), "run-all"]);
    let mut seq_out = None;
    for sub in [
        "synth",
        "distill",
        "extract",
        "bootstrap",
        "assemble",
        "augment",
        "eval",
    ] {
        seq_out = Some(ok(&["--config", p(&seq_cfg), sub]));
    }
    let seq_out = seq_out.unwrap();
    assert_eq!(all_out.stdout, seq_out.stdout, "eval reports differ");

    let (a, s) = (snapshot(&all), snapshot(&seq));
    assert_eq!(a.keys().collect::<Vec<_>>(), s.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert_eq!(v, &s[k], "{k} differs");
    }
    assert!(!a.contains_key("run.lock"));
    assert!(a.contains_key("meta/eval.json"));
}

#[test]
fn eval_reports_one_json_line_per_size() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = write_config(dir.path(), &run);
    ok(&["--config", p(&cfg), "run-all"]);
    let o = ok(&["--config", p(&cfg), "eval", "--sizes", "8,16", "--seeds", "1,2,3"]);
    let lines: Vec<serde_json::Value> = String::from_utf8(o.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    for (line, size) in lines.iter().zip([8, 16]) {
        assert_eq!(line["sample_size"], size);
        assert_eq!(line["seeds"], serde_json::json!([1, 2, 3]));
        assert_eq!(line["per_seed_accuracy"].as_array().unwrap().len(), 3);
    }
    let again = ok(&["--config", p(&cfg), "eval", "--sizes", "8,16", "--seeds", "1,2,3"]);
    assert_eq!(
        String::from_utf8(again.stdout).unwrap().lines().count(),
        2,
        "repeatable"
    );
    let meta: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("meta/eval.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["eval"]["sizes"], serde_json::json!([8, 16]));
    assert_eq!(meta["config_hash"].as_str().unwrap().len(), 64);
}
