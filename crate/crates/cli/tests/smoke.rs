use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bgseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bgseg"))
        .args(args)
        .env_remove("BGSEG_JOBS")
        .output()
        .expect("spawn bgseg")
}

fn ok(args: &[&str]) -> String {
    let out = bgseg(args);
    assert!(out.status.success(), "bgseg {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn fixtures(dir: &Path, count: usize, size: &str) {
    ok(&["make-fixtures", "--out", p(dir), "--count", &count.to_string(), "--size", size, "--fixture-seed", "4"]);
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn discover_writes_masks_and_records() {
    let tmp = tempfile::tempdir().unwrap();
    let shards = tmp.path().join("shards");
    let out = tmp.path().join("coarse");
    fixtures(&shards, 3, "small");
    ok(&["discover", "--shards", p(&shards), "--out", p(&out), "--overlay"]);
    let manifest = json(&shards.join("manifest.json"));
    let ids: Vec<&str> = manifest["samples"].as_array().unwrap().iter().map(|s| s["id"].as_str().unwrap()).collect();
    assert_eq!(ids.len(), 3);
    for id in ids {
        for suffix in [".png", "_overlay.png", ".json"] {
            assert!(out.join(format!("{id}{suffix}")).is_file(), "{id}{suffix}");
        }
        let rec = json(&out.join(format!("{id}.json")));
        assert_eq!(rec["config_hash"].as_str().unwrap().len(), 64);
    }
}

#[test]
fn train_infer_eval_recovers_planted_objects() {
    let tmp = tempfile::tempdir().unwrap();
    let shards = tmp.path().join("shards");
    let run = tmp.path().join("run");
    let pred = tmp.path().join("pred");
    // 4x4-patch images are too coarse for self-training; use 14x14
    fixtures(&shards, 16, "medium");
    let common = ["--iters", "150", "--m-switch", "50", "--batch", "8"];
    let mut args = vec!["train", "--shards", p(&shards), "--out", p(&run)];
    args.extend(common);
    ok(&args);
    for f in ["head.ckpt", "train_log.jsonl", "train_summary.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    ok(&["infer", "--shards", p(&shards), "--checkpoint", p(&run.join("head.ckpt")), "--out", p(&pred)]);
    assert!(pred.join("timing.csv").is_file());

    let report = tmp.path().join("eval.json");
    let table = ok(&["eval", "--pred", p(&pred), "--gt", p(&shards), "--report", p(&report)]);
    assert!(table.contains("IoU"), "{table}");
    let r = json(&report);
    assert_eq!(r["images"], 16);
    let iou = r["saliency"]["iou"].as_f64().unwrap();
    assert!(iou >= 0.98, "IoU {iou}");
    assert!(r["corloc"]["corloc"].as_f64().unwrap() >= 0.95);

    // identical inputs give byte-identical reports
    let again = tmp.path().join("eval2.json");
    ok(&["eval", "--pred", p(&pred), "--gt", p(&shards), "--report", p(&again)]);
    assert_eq!(fs::read(&report).unwrap(), fs::read(&again).unwrap());

    // the same hash appears in every artifact of the run
    let hash = r["config_hash"].as_str().unwrap().to_string();
    assert_eq!(json(&run.join("train_summary.json"))["config_hash"].as_str().unwrap().len(), 64);
    let first = fs::read_dir(&pred)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "json"))
        .unwrap();
    assert_eq!(json(&first)["config_hash"].as_str().unwrap(), hash);
    let printed = ok(&["print-config"]);
    assert!(printed.contains(&hash), "{printed}");
}

#[test]
fn unpaired_predictions_exit_with_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let shards = tmp.path().join("shards");
    let coarse = tmp.path().join("coarse");
    fixtures(&shards, 3, "small");
    ok(&["discover", "--shards", p(&shards), "--out", p(&coarse)]);
    // remove one prediction so the sets no longer pair up
    let victim = fs::read_dir(&coarse)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "png"))
        .unwrap();
    fs::remove_file(victim).unwrap();
    let out = bgseg(&["eval", "--pred", p(&coarse), "--gt", p(&shards)]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pair"));
}

#[test]
fn out_of_range_tau_exits_with_code_2() {
    let out = bgseg(&["--tau", "1.5", "print-config"]);
    assert_eq!(out.status.code(), Some(2));
    let out = bgseg(&["print-config", "--jobs", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("run.toml");
    fs::write(&file, "[discovery]\ntau = 0.2\n\n[train]\nlambda_mix = 2.5\n").unwrap();
    let from_file = ok(&["--config", p(&file), "print-config"]);
    assert!(from_file.contains("tau = 0.2\n") && from_file.contains("lambda_mix = 2.5"), "{from_file}");
    let flagged = ok(&["--config", p(&file), "--tau", "0.25", "print-config"]);
    assert!(flagged.contains("tau = 0.25\n") && flagged.contains("lambda_mix = 2.5"), "{flagged}");
    assert_ne!(from_file.lines().next(), flagged.lines().next(), "hash follows the override");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("run.toml");
    fs::write(&file, "[discovery]\ntaau = 0.2\n").unwrap();
    assert_eq!(bgseg(&["--config", p(&file), "print-config"]).status.code(), Some(2));
}

#[test]
fn missing_shard_directory_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bgseg(&["discover", "--shards", p(&tmp.path().join("nope")), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}
