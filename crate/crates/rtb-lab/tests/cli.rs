//! End-to-end smoke test of the command-line binary: the full
//! train/sample/eval/compare pipeline on a 2-d task with T = 16 must finish
//! in under a minute on one core, and exit codes must follow the contract
//! (0 ok, 2 config error, 3 divergence, 4 oracle mismatch).

use std::path::Path;
use std::process::Command;
use std::time::Instant;

const BIN: &str = env!("CARGO_BIN_EXE_rtb-lab");

const SMOKE_CONFIG: &str = r#"
[target]
kind = "two_mode"

[schedule]
steps = 16
sigma = 1.5

[prior]
iters = 400
batch = 64
hidden = [32, 32]

[task]
kind = "mask"
mask_keep = [0]
sigma_y = 0.5
y = [2.0]
seed = 1

[rtb]
iters = 300
batch = 32

[eval]
n_samples = 4000
is_samples = 20000
elbo_samples = 500
"#;

fn run(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn path_str(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

#[test]
fn smoke_pipeline_under_a_minute() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.toml");
    std::fs::write(&cfg, SMOKE_CONFIG).unwrap();
    let cfg_s = path_str(&cfg);
    let prior = path_str(&dir.path().join("prior.json"));
    let post = path_str(&dir.path().join("post.json"));
    let runs = dir.path().join("runs");
    std::fs::create_dir_all(&runs).unwrap();

    let t0 = Instant::now();
    run_ok(&["train-prior", "--config", &cfg_s, "--out", &prior]);
    run_ok(&["train-posterior", "--config", &cfg_s, "--prior", &prior, "--out", &post]);
    run_ok(&[
        "baseline", "--config", &cfg_s, "--prior", &prior, "--algorithm", "dps",
        "--out", &path_str(&dir.path().join("dps.csv")),
    ]);
    run_ok(&[
        "sample", "--checkpoint", &post, "--n", "2000", "--seed", "3",
        "--out", &path_str(&dir.path().join("samples.csv")),
    ]);
    run_ok(&[
        "eval", "--config", &cfg_s, "--checkpoint", &post,
        "--out", &path_str(&runs.join("rtb.csv")),
        "--grid-out", &path_str(&dir.path().join("grid.csv")),
    ]);
    run_ok(&[
        "compare", "--runs", &path_str(&runs),
        "--out", &path_str(&dir.path().join("table.csv")),
    ]);
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs() < 60, "smoke pipeline took {elapsed:?}");

    // every output carries the provenance header
    for f in ["dps.csv", "samples.csv", "grid.csv", "table.csv"] {
        let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
        assert!(text.starts_with("# format_version="), "{f} missing metadata");
        assert!(text.contains("# build=rtb-lab-"), "{f} missing build id");
    }
}

#[test]
fn config_errors_exit_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[target]\nkind = \"two_mode\"\nno_such_field = 1\n").unwrap();
    let out = run(&[
        "train-prior", "--config", &path_str(&cfg),
        "--out", &path_str(&dir.path().join("x.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_file_exit_code_two() {
    let out = run(&["train-prior", "--config", "/nonexistent.toml", "--out", "/tmp/x.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn tampered_checkpoint_exit_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.toml");
    std::fs::write(&cfg, SMOKE_CONFIG).unwrap();
    let prior = dir.path().join("prior.json");
    run_ok(&["train-prior", "--config", &path_str(&cfg), "--out", &path_str(&prior)]);

    let mut ckpt: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&prior).unwrap()).unwrap();
    ckpt["drift"]["params"][0] =
        serde_json::json!(ckpt["drift"]["params"][0].as_f64().unwrap() + 1.0);
    std::fs::write(&prior, serde_json::to_string(&ckpt).unwrap()).unwrap();

    let out = run(&[
        "sample", "--checkpoint", &path_str(&prior), "--n", "10", "--seed", "0",
        "--out", &path_str(&dir.path().join("s.csv")),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn worker_fanout_env_does_not_crash() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.toml");
    std::fs::write(&cfg, SMOKE_CONFIG).unwrap();
    let prior = dir.path().join("prior.json");
    run_ok(&["train-prior", "--config", &path_str(&cfg), "--out", &path_str(&prior)]);
    let out = Command::new(BIN)
        .env("RTB_LAB_THREADS", "2")
        .args([
            "sample", "--checkpoint", &path_str(&prior), "--n", "1000", "--seed", "5",
            "--out", &path_str(&dir.path().join("s2.csv")),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    // fixed thread count: rerun is byte-identical
    let first = std::fs::read(dir.path().join("s2.csv")).unwrap();
    let out2 = Command::new(BIN)
        .env("RTB_LAB_THREADS", "2")
        .args([
            "sample", "--checkpoint", &path_str(&prior), "--n", "1000", "--seed", "5",
            "--out", &path_str(&dir.path().join("s3.csv")),
        ])
        .output()
        .unwrap();
    assert!(out2.status.success());
    assert_eq!(first, std::fs::read(dir.path().join("s3.csv")).unwrap());
}
