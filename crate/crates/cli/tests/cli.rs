use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use scenegen::dataset::{read_manifest, INDEX_FILE};

fn scenegen(args: &[&str], workers: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_scenegen"));
    cmd.args(args).env("RUST_LOG", "warn");
    match workers {
        Some(w) => cmd.env("SCENEGEN_WORKERS", w),
        None => cmd.env_remove("SCENEGEN_WORKERS"),
    };
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn generate(dir: &Path, factors: &str, episodes: &str, workers: &str) -> Output {
    let out = dir.to_str().unwrap();
    scenegen(&["generate", "--task", "stack", "--factors", factors, "--episodes", episodes, "--seed", "42", "--out", out], Some(workers))
}

#[test]
fn generation_is_independent_of_worker_count() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let oa = generate(&a, "camera,light", "30", "1");
    let ob = generate(&b, "camera,light", "30", "4");
    assert_eq!(code(&oa), 0, "{}", String::from_utf8_lossy(&oa.stderr));
    assert_eq!(code(&ob), 0);
    let (ma, mb) = (read_manifest(&a).unwrap(), read_manifest(&b).unwrap());
    assert_eq!(ma.episode_count, 30);
    assert_eq!(ma.content_hash, mb.content_hash);
    assert_eq!(fs::read(a.join(INDEX_FILE)).unwrap(), fs::read(b.join(INDEX_FILE)).unwrap());
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&scenegen(&["frobnicate"], None)), 1);
    assert_eq!(code(&scenegen(&["generate", "--out", "x", "--episodes", "many"], None)), 1);
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let o = scenegen(&["generate", "--factors", "gravity", "--out", out.to_str().unwrap()], None);
    assert_eq!(code(&o), 1);
    let o = scenegen(&["generate", "--task", "juggle", "--out", out.to_str().unwrap()], None);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&generate(&out, "none", "2", "0")), 1);
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    assert_eq!(code(&scenegen(&["--config", cfg.to_str().unwrap(), "stats", "x"], None)), 1);
}

#[test]
fn data_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    assert_eq!(code(&scenegen(&["stats", missing.to_str().unwrap()], None)), 2);
    let ckpt = tmp.path().join("p.ckpt");
    assert_eq!(code(&scenegen(&["train", missing.to_str().unwrap(), "--out", ckpt.to_str().unwrap()], None)), 2);
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    assert_eq!(code(&scenegen(&["eval", ckpt.to_str().unwrap(), "--rollouts", "1"], None)), 2);
}

#[test]
fn stats_reports_balanced_cameras() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    assert_eq!(code(&generate(&d, "camera", "20", "2")), 0);
    let o = scenegen(&["stats", d.to_str().unwrap(), "--json"], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["episodes"], 20);
    assert_eq!(v["camera_balanced"], true);
    let counts: Vec<u64> = v["camera_counts"].as_array().unwrap().iter().map(|c| c.as_u64().unwrap()).collect();
    assert_eq!(counts.len(), 100);
    assert_eq!(counts.iter().filter(|&&c| c == 1).count(), 20);
}

#[test]
fn train_eval_and_ablation_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[train]\nepochs = 2\nhidden = [32]\n[eval]\nmax_steps = 40\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    let d = tmp.path().join("d");
    assert_eq!(code(&generate(&d, "none", "6", "1")), 0);
    let ckpts = tmp.path().join("ckpts");
    fs::create_dir(&ckpts).unwrap();
    let none = ckpts.join("none.ckpt");
    let o = scenegen(&["--config", cfg, "train", d.to_str().unwrap(), "--out", none.to_str().unwrap()], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let csv = tmp.path().join("eval.csv");
    let args = ["--config", cfg, "eval", none.to_str().unwrap(), "--factors", "none,height", "--rollouts", "3", "--out"];
    let o = scenegen(&[&args[..], &[csv.to_str().unwrap()]].concat(), Some("2"));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first = fs::read_to_string(&csv).unwrap();
    assert!(first.starts_with("task,train_factors,eval_factor,rollouts,successes,rate\n"), "{first}");
    assert_eq!(first.lines().count(), 3);
    assert!(tmp.path().join("eval.md").exists());
    let o = scenegen(&[&args[..], &[csv.to_str().unwrap()]].concat(), Some("1"));
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(&csv).unwrap(), first);

    // the expert needs no checkpoint and always succeeds on this task
    let o = scenegen(&["eval", "expert", "--factors", "all", "--rollouts", "4"], None);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("| 1.00 |"));

    // the camera regime has no checkpoint: its cells are skipped and the run exits 2
    let matrix = tmp.path().join("ablation.csv");
    let o = scenegen(
        &[
            "--config", cfg, "ablation", "--checkpoints", ckpts.to_str().unwrap(), "--regimes", "camera",
            "--factors", "camera,height", "--rollouts", "2", "--out", matrix.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(code(&o), 2);
    let text = fs::read_to_string(&matrix).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert_eq!(text.lines().filter(|l| l.contains("skipped: missing checkpoint")).count(), 2);
    let md = scenegen(&["render", matrix.to_str().unwrap()], None);
    assert!(String::from_utf8_lossy(&md.stdout).contains("| camera | skip | skip |"));
}
