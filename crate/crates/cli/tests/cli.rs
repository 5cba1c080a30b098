use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn chunklab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chunklab"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = chunklab(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn pipeline(dir: &Path) -> Vec<u8> {
    ok(&["gen-data", "--task", "chase", "--episodes", "20", "--seed", "3", "--out", "d.jsonl"], dir);
    ok(
        &["train", "--mode", "offset", "--delta-max", "3", "--data", "d.jsonl", "--steps", "40", "--seed", "1", "--out", "p.ckpt"],
        dir,
    );
    ok(
        &[
            "eval", "--ckpt", "p.ckpt", "--task", "chase", "--strategy", "vlash", "--delta", "3", "--exec-horizon", "4",
            "--episodes", "6", "--seed", "0", "--out", "results.json",
        ],
        dir,
    );
    fs::read(dir.join("results.json")).unwrap()
}

#[test]
fn gen_data_writes_one_line_per_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen-data", "--task", "reach", "--episodes", "50", "--seed", "0", "--out", "d.jsonl"], dir.path());
    let text = fs::read_to_string(dir.path().join("d.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 50);
    let manifest: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("d.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen-data");
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["seeds"]["first"], 0);
}

#[test]
fn full_pipeline_is_byte_identical_across_runs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    assert_eq!(first, second);
    let results: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(results["episodes"].as_array().unwrap().len(), 6);
    assert_eq!(results["strategy"], "vlash");
    assert!(results["summary"]["success_rate"].as_f64().unwrap() <= 1.0);
    let ma = fs::read(a.path().join("results.json.manifest.json")).unwrap();
    let mb = fs::read(b.path().join("results.json.manifest.json")).unwrap();
    let (ma, mb): (Value, Value) = (serde_json::from_slice(&ma).unwrap(), serde_json::from_slice(&mb).unwrap());
    assert_eq!(ma["config_hash"], mb["config_hash"]);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = chunklab(
        &["eval", "--ckpt", "nope.ckpt", "--task", "chase", "--strategy", "sync", "--exec-horizon", "4", "--out", "r.json"],
        d,
    );
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.ckpt"));

    assert_eq!(chunklab(&["train", "--data", "none.jsonl", "--out", "p.ckpt"], d).status.code(), Some(3));

    fs::write(d.join("bad.json"), r#"{"steps": 10, "learning_rate": 1.0}"#).unwrap();
    let bad = chunklab(&["train", "--task", "reach", "--config", "bad.json", "--out", "p.ckpt"], d);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("learning_rate"));

    let packed = chunklab(&["train", "--task", "reach", "--episodes", "2", "--mode", "packed", "--delta-max", "2", "--out", "p.ckpt"], d);
    assert_eq!(packed.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&packed.stderr).contains("transformer"));

    let unknown = chunklab(&["gen-data", "--task", "juggle", "--out", "d.jsonl"], d);
    assert_eq!(unknown.status.code(), Some(2));
    let flag = chunklab(&["eval", "--strategy", "fastest"], d);
    assert_eq!(flag.status.code(), Some(2));

    ok(&["train", "--task", "reach", "--episodes", "4", "--steps", "2", "--out", "p.ckpt"], d);
    let infeasible = chunklab(
        &["eval", "--ckpt", "p.ckpt", "--task", "reach", "--strategy", "naive", "--delta", "3", "--exec-horizon", "2", "--out", "r.json"],
        d,
    );
    assert_eq!(infeasible.status.code(), Some(2));
    let dims = chunklab(
        &["eval", "--ckpt", "p.ckpt", "--task", "chase", "--strategy", "sync", "--exec-horizon", "2", "--out", "r.json"],
        d,
    );
    assert_eq!(dims.status.code(), Some(2));
}

#[test]
fn sweep_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["train", "--task", "reach", "--episodes", "4", "--steps", "5", "--out", "ckpt/reach.ckpt"], d);
    fs::write(
        d.join("sweep.json"),
        r#"{"preset": "custom", "tasks": ["reach"], "strategies": ["sync", "vlash"], "episodes": 2,
            "points": [{"delta": 1, "K": 2}], "checkpoints": {"reach": "ckpt/reach.ckpt"}}"#,
    )
    .unwrap();
    ok(&["sweep", "--config", "sweep.json", "--out", "out"], d);
    let csv = fs::read_to_string(d.join("out/results.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("reach,sync,0,2,1,"));
    assert!(lines[2].starts_with("reach,vlash,1,2,1,"));
    assert!(d.join("out/results.json").exists() && d.join("out/manifest.json").exists());

    let preset = chunklab(&["sweep", "--preset", "delay", "--config", "sweep.json", "--out", "out2"], d);
    assert!(preset.status.success());
    assert_eq!(fs::read_to_string(d.join("out2/results.csv")).unwrap().lines().count(), 1 + 5 + 4);

    fs::write(d.join("nockpt.json"), r#"{"preset": "delay", "tasks": ["chase"], "checkpoints": {"chase": "gone.ckpt"}}"#).unwrap();
    let missing = chunklab(&["sweep", "--config", "nockpt.json", "--out", "out3"], d);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("gone.ckpt"));
}

#[test]
fn analytics_prints_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["analytics", "--out", "a.json"], dir.path());
    let text = String::from_utf8(out.stdout).unwrap();
    for cell in ["530.4", "536.1", "564.1", "17.4x", "14.9x", "8.8x", "269.0", "202.6"] {
        assert!(text.contains(cell), "missing {cell}");
    }
    let json: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("a.json")).unwrap()).unwrap();
    assert_eq!(json["reaction"].as_array().unwrap().len(), 3);
}
