use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use edpq_core::io::{load_dataset, read_metrics};

fn edpq(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_edpq"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = edpq(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Small networks so the training commands finish quickly.
const SMALL: &str = "
[train]
batch_size = 16
policy_hidden = [16, 16]
critic_hidden = [16, 16]
embed_dim = 4
members = 4
eval_episodes = 5
";

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    ok(
        &["gen-data", "--env", "toy-chain", "--episodes", "100", "--seed", "1", "--out", "d.bin"],
        dir.path(),
    );
    dir
}

fn train_args<'a>(run: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["train", "--data", "d.bin", "--run-dir", run, "--config", "small.toml"];
    v.extend_from_slice(extra);
    v
}

#[test]
fn gen_data_writes_two_transitions_per_episode() {
    let dir = setup();
    let stdout = ok(
        &["gen-data", "--episodes", "100", "--seed", "1", "--out", "again.bin"],
        dir.path(),
    );
    assert!(stdout.contains("config hash: "));
    let data = load_dataset(dir.path().join("d.bin")).unwrap();
    assert_eq!(data.len(), 200);
    let a = fs::read(dir.path().join("d.bin")).unwrap();
    let b = fs::read(dir.path().join("again.bin")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    let dir = setup();
    let p = dir.path();
    let zero = edpq(&["gen-data", "--episodes", "0", "--out", "z.bin"], p);
    assert_eq!(zero.status.code(), Some(2));
    assert!(!p.join("z.bin").exists());
    assert_eq!(edpq(&["gen-data", "--env", "maze", "--out", "z.bin"], p).status.code(), Some(2));
    assert_eq!(edpq(&["train", "--data", "d.bin"], p).status.code(), Some(2));

    let missing = edpq(&["train", "--data", "missing.bin", "--run-dir", "r"], p);
    assert_eq!(missing.status.code(), Some(1));
    fs::write(p.join("bad.toml"), "[train]\nmembrs = 3\n").unwrap();
    let bad = edpq(&train_args("r", &[]).iter().map(|s| if *s == "small.toml" { "bad.toml" } else { s }).collect::<Vec<_>>(), p);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("membrs"));
}

#[test]
fn train_smoke_run_writes_the_run_directory() {
    let dir = setup();
    let p = dir.path();
    let stdout = ok(&train_args("run", &["--epochs", "1", "--steps-per-epoch", "50"]), p);
    assert!(stdout.contains("config hash: "));
    let run = p.join("run");
    let metrics = read_metrics(run.join("metrics.jsonl")).unwrap();
    assert!(!metrics.is_empty());
    assert_eq!(metrics.last().unwrap().step, 50);
    assert!(run.join("config.toml").is_file());
    assert!(run.join("checkpoints/final.ckpt").is_file());
    assert!(run.join("eval").is_dir());
}

#[test]
fn auto_alpha_moves_the_temperature() {
    let dir = setup();
    let args = train_args("run", &["--alpha", "auto", "--epochs", "4", "--steps-per-epoch", "10"]);
    ok(&args, dir.path());
    let metrics = read_metrics(dir.path().join("run/metrics.jsonl")).unwrap();
    assert_eq!(metrics.len(), 4);
    let first = metrics[0].alpha;
    assert!(metrics.iter().any(|m| m.alpha != first), "{metrics:?}");
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let dir = setup();
    let p = dir.path();
    for run in ["a", "b"] {
        ok(&train_args(run, &["--seed", "1", "--epochs", "3", "--steps-per-epoch", "10"]), p);
    }
    let a = fs::read(p.join("a/metrics.jsonl")).unwrap();
    let b = fs::read(p.join("b/metrics.jsonl")).unwrap();
    assert_eq!(a, b);
    ok(&train_args("c", &["--seed", "2", "--epochs", "3", "--steps-per-epoch", "10"]), p);
    assert_ne!(a, fs::read(p.join("c/metrics.jsonl")).unwrap());
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = setup();
    let p = dir.path();
    let flags = ["--epochs", "3", "--steps-per-epoch", "10", "--checkpoint-every", "10"];
    ok(&train_args("full", &flags), p);
    ok(&train_args("cut", &flags), p);

    // simulate a crash after step 10
    let cut = p.join("cut");
    fs::remove_file(cut.join("checkpoints/step_00000020.ckpt")).unwrap();
    fs::remove_file(cut.join("checkpoints/step_00000030.ckpt")).unwrap();
    fs::remove_file(cut.join("checkpoints/final.ckpt")).unwrap();
    let kept: Vec<String> = fs::read_to_string(cut.join("metrics.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| edpq_core::io::parse_metrics_line(l).unwrap().step <= 10)
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(cut.join("metrics.jsonl"), kept.concat()).unwrap();

    let stdout = ok(&["train", "--data", "d.bin", "--run-dir", "cut", "--resume"], p);
    assert!(stdout.contains("resuming from step 10"));
    for file in ["metrics.jsonl", "checkpoints/final.ckpt", "checkpoints/step_00000030.ckpt"] {
        assert_eq!(
            fs::read(p.join("full").join(file)).unwrap(),
            fs::read(cut.join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn eval_reports_each_episode_deterministically() {
    let dir = setup();
    let p = dir.path();
    ok(&train_args("run", &["--epochs", "1", "--steps-per-epoch", "5"]), p);
    let ckpt = "run/checkpoints/final.ckpt";
    ok(&["eval", "--checkpoint", ckpt, "--episodes", "10", "--seed", "4"], p);
    let report = p.join("run/eval/step_00000005_seed_4.json");
    let first: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(first["returns"].as_array().unwrap().len(), 10);
    assert_eq!(first["episodes"], 10);
    ok(&["eval", "--checkpoint", ckpt, "--episodes", "10", "--seed", "4", "--out", "again.json"], p);
    let second: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(p.join("again.json")).unwrap()).unwrap();
    assert_eq!(first["returns"], second["returns"]);
    assert_eq!(edpq(&["eval", "--checkpoint", "nope.ckpt"], p).status.code(), Some(1));
}

#[test]
fn demo_reconstruct_writes_table_and_clouds() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("tiny.toml"), "[reconstruct]\nhidden = [16, 16]\ntrain_samples = 200\n").unwrap();
    ok(
        &[
            "demo-reconstruct", "--out", "rec", "--seeds", "0", "--config", "tiny.toml",
            "--train-steps", "20", "--eval-samples", "50",
        ],
        p,
    );
    let mut reader = csv::Reader::from_path(p.join("rec/reconstruct.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 6);
    for row in &rows {
        assert!(row[3].parse::<f64>().unwrap() >= 0.0);
    }
    assert!(p.join("rec/clouds/seed_0_posterior_T5.csv").is_file());
    assert!(p.join("rec/clouds/seed_0_heldout.csv").is_file());
}

#[test]
fn ablate_runs_every_cell() {
    let dir = setup();
    let p = dir.path();
    ok(
        &[
            "ablate", "--out", "abl", "--config", "small.toml", "--alphas", "0,0.01",
            "--members-grid", "2", "--seeds", "0,1", "--epochs", "1", "--steps-per-epoch", "5",
            "--episodes", "10",
        ],
        p,
    );
    let count = |f: &str| csv::Reader::from_path(p.join("abl").join(f)).unwrap().records().count();
    assert_eq!(count("runs.csv"), 4);
    assert_eq!(count("summary.csv"), 2);
    assert_eq!(fs::read_dir(p.join("abl/cells")).unwrap().count(), 4);
}
