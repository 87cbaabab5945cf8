use std::path::Path;
use std::process::{Command, Output};

fn neubay(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neubay"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn neubay")
}

fn ok(args: &[&str]) -> String {
    let out = neubay(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn generate_validate_and_summarize_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["d.bin", "d.jsonl"] {
        let path = dir.path().join(name);
        ok(&["dataset", "generate", "--behavior", "random", "--n", "12", "--horizon", "20", "--out", p(&path)]);
        assert!(ok(&["dataset", "validate", p(&path)]).starts_with("ok: 12 trajectories, 240 transitions"));
        let stats = ok(&["dataset", "stats", p(&path)]);
        assert!(stats.contains("state_dim 1 action_dim 1 T 20"), "{stats}");
        assert!(stats.contains("      20 12"), "{stats}");
    }
}

#[test]
fn missing_dataset_is_an_error() {
    let out = neubay(&["dataset", "validate", "/nonexistent/data.bin"]);
    assert!(!out.status.success());
}

#[test]
fn backup_bound_grid_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bb.csv");
    let stdout = ok(&["diag", "backup-bound", "--gamma", "0.9", "--H", "12", "--delta", "0.1", "--out", p(&out)]);
    assert!(stdout.contains("12 grid points, 0 violations"), "{stdout}");
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 13);
}

#[test]
fn theory_verify_writes_one_row_per_gap() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("gap.csv");
    ok(&["theory", "verify", "--trials", "100", "--eps", "0.1", "--eps", "0.3", "--out", p(&out)]);
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 3);
}

#[test]
fn bad_discount_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = neubay(&["theory", "verify", "--gamma", "0.3", "--trials", "10", "--out", p(&dir.path().join("x.csv"))]);
    assert!(!out.status.success());
}

#[test]
fn model_pipeline_on_a_small_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.bin");
    let ckpt = dir.path().join("world.ckpt");
    ok(&["dataset", "generate", "--n", "20", "--horizon", "20", "--out", p(&data)]);
    ok(&["model", "train", "--dataset", p(&data), "--pool", "2", "--top", "2", "--out", p(&ckpt)]);
    let cdf = dir.path().join("cdf.csv");
    ok(&["model", "cdf", "--ckpt", p(&ckpt), "--dataset", p(&data), "--out", p(&cdf)]);
    assert!(std::fs::read_to_string(&cdf).unwrap().lines().count() > 1);
    let horizons = dir.path().join("h.csv");
    ok(&["rollout", "analyze", "--ckpt", p(&ckpt), "--dataset", p(&data), "--k", "10", "--out", p(&horizons)]);
    assert!(horizons.exists());
    let study = dir.path().join("study");
    ok(&["diag", "compound", "--ckpt", p(&ckpt), "--dataset", p(&data), "--rollouts", "10", "--steps", "10", "--out", p(&study)]);
    assert!(study.join("bands.csv").exists() && study.join("scatter.csv").exists());
}
