use std::path::Path;
use std::process::Command;

fn mltfr(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_mltfr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn train_evaluate_report_round_trip() {
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let trained = mltfr(&["train", "--config", config, "--seed", "3", "--out", out]);
    assert!(trained.contains("HR@10"));
    let evaluated = mltfr(&["evaluate", "--out", out]);
    assert!(evaluated.contains("HR@10"));
    let report = mltfr(&[
        "report",
        "--base",
        &format!("{out}/popularity.txt"),
        "--mltfr",
        &format!("{out}/metrics.txt"),
    ]);
    assert!(report.contains("Imp."));
    let cfg = std::fs::read_to_string(Path::new(out).join("config.toml")).unwrap();
    assert!(cfg.contains("seed = 3"));
}

#[test]
fn prepare_data_writes_dense_log() {
    let config = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml");
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    mltfr(&["prepare-data", "--config", config, "--out", out]);
    let text = std::fs::read_to_string(dir.path().join("interactions.txt")).unwrap();
    assert_eq!(text.lines().count(), 120);
    assert!(dir.path().join("item_ids.tsv").exists());
}

#[test]
fn unknown_variant_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_mltfr"))
        .args(["train", "--variant", "bogus"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
