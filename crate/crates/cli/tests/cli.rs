use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sde_fim::datagen::Dataset;
use sde_fim::model::Checkpoint;

fn sde_fim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sde-fim"))
        .args(args)
        .current_dir(dir)
        .env("SDE_FIM_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = sde_fim(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    sde_fim(dir, args).status.code().unwrap()
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

const TRAIN: &[&str] = &["--batch-size", "2", "--context-min", "8", "--context-max", "32", "--hidden", "16", "--locations", "4"];

fn train(dir: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", "d.ds"];
    args.extend_from_slice(TRAIN);
    args.extend_from_slice(extra);
    ok(dir, &args)
}

fn series(dir: &Path, rows: usize) {
    let mut s = String::from("time,x1\n");
    for k in 0..rows {
        s.push_str(&format!("{},{}\n", k as f64 * 0.01, (k as f64 * 0.1).sin()));
    }
    std::fs::write(dir.join("s.csv"), s).unwrap();
}

#[test]
fn generate_is_deterministic_and_filters_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--count", "60", "--seed", "7", "--out", "a.ds"]);
    ok(d, &["generate", "--count", "60", "--seed", "7", "--out", "b.ds"]);
    assert_eq!(std::fs::read(d.join("a.ds")).unwrap(), std::fs::read(d.join("b.ds")).unwrap());

    let manifest = json(d.join("a.ds.manifest.json"));
    assert!(manifest.to_string().contains("rejection"), "{manifest}");

    ok(d, &["generate", "--count", "10", "--dims", "1", "--out", "c.ds"]);
    let ds = Dataset::from_bytes(&std::fs::read(d.join("c.ds")).unwrap()).unwrap();
    assert_eq!(ds.records.len(), 10);
    assert!(ds.records.iter().all(|r| r.system.dim() == 1));
}

#[test]
fn resume_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--count", "8", "--dims", "1", "--out", "d.ds"]);
    train(d, &["--steps", "6", "--checkpoint-every", "3", "--out", "full.ck"]);
    train(d, &["--steps", "6", "--resume", "full.ck.step3", "--out", "resumed.ck"]);
    let full = Checkpoint::from_bytes(&std::fs::read(d.join("full.ck")).unwrap()).unwrap();
    let resumed = Checkpoint::from_bytes(&std::fs::read(d.join("resumed.ck")).unwrap()).unwrap();
    assert_eq!(full.step, 6);
    assert_eq!(full.params.values, resumed.params.values);
    assert_eq!(full.optimizer, resumed.optimizer);

    let log = std::fs::read_to_string(d.join("full.ck.log.csv")).unwrap();
    let steps: Vec<u64> = log.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(steps, (1..=6).collect::<Vec<_>>());
}

#[test]
fn infer_from_csv_and_dataset_records() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--count", "4", "--dims", "1", "--out", "d.ds"]);
    train(d, &["--steps", "1", "--out", "m.ck"]);
    series(d, 5000);
    ok(d, &["infer", "--checkpoint", "m.ck", "--context", "s.csv", "--system", "double-well", "--plot", "p.csv", "--out", "e.json"]);
    let e = json(d.join("e.json"));
    assert_eq!(e["transitions"], 4999);
    assert_eq!(e["grid"]["bounds"], serde_json::json!([[-2.0, 2.0]]));
    assert_eq!(e["grid"]["total"], 1024);
    assert_eq!(e["estimate"]["drift"].as_array().unwrap().len(), 1024);
    let plot = std::fs::read_to_string(d.join("p.csv")).unwrap();
    assert_eq!(plot.lines().count(), 1 + 1024);

    ok(d, &["infer", "--checkpoint", "m.ck", "--context", "d.ds", "--record", "2", "--bounds", "-1:1", "--grid", "7", "--out", "r.json"]);
    assert_eq!(json(d.join("r.json"))["estimate"]["drift"].as_array().unwrap().len(), 7);
}

#[test]
fn finetune_iterations_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["generate", "--count", "4", "--dims", "1", "--out", "d.ds"]);
    train(d, &["--steps", "1", "--out", "m.ck"]);
    ok(d, &["simulate", "--system", "double-well", "--paths", "1", "--observations", "400", "--out", "dw.csv"]);

    ok(d, &["finetune", "--checkpoint", "m.ck", "--context", "dw.csv", "--iters", "0", "--out", "f0.ck"]);
    let base = Checkpoint::from_bytes(&std::fs::read(d.join("m.ck")).unwrap()).unwrap();
    let f0 = Checkpoint::from_bytes(&std::fs::read(d.join("f0.ck")).unwrap()).unwrap();
    assert_eq!(base.params.values, f0.params.values);

    let common = ["finetune", "--checkpoint", "m.ck", "--context", "dw.csv", "--iters", "3", "--batch", "64"];
    for (mode, out) in [("dense", "fd.ck"), ("sparse", "fs.ck")] {
        let mut args = common.to_vec();
        args.extend(["--mode", mode, "--substeps", "2", "--out", out]);
        ok(d, &args);
        let trace = std::fs::read_to_string(d.join(format!("{out}.trace.csv"))).unwrap();
        assert_eq!(trace.lines().count(), 1 + 3, "{mode}");
        let tuned = Checkpoint::from_bytes(&std::fs::read(d.join(out)).unwrap()).unwrap();
        assert_ne!(tuned.params.values, base.params.values);
    }
}

#[test]
fn evaluate_truth_and_echoed_kernel() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["evaluate", "--system", "double-well", "--truth", "--metric", "mse", "--out", "mse.json"]);
    let r = json(d.join("mse.json"));
    assert_eq!(r["report"]["mse"]["drift"], 0.0);
    assert_eq!(r["report"]["mse"]["diffusion"], 0.0);

    let args = [
        "evaluate", "--system", "hopf", "--truth", "--metric", "mmd", "--reference-paths", "6", "--reference-observations", "20", "--level",
        "3", "--bandwidth", "0.7", "--out", "mmd.json",
    ];
    ok(d, &args);
    let m = &json(d.join("mmd.json"))["report"]["mmd"];
    assert_eq!(m["config"]["level"], 3);
    assert_eq!(m["config"]["kernel"]["rbf"]["bandwidth"], 0.7);
    assert_eq!(m["paths"], 6);

    // Replaying the embedded config gives the same report.
    ok(d, &["--config", "mmd.json", "--out", "again.json"]);
    assert_eq!(std::fs::read(d.join("mmd.json")).unwrap(), std::fs::read(d.join("again.json")).unwrap());
}

#[test]
fn simulate_and_catalog() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let listing = ok(d, &["catalog"]);
    assert_eq!(listing.lines().count(), 8);
    ok(d, &["simulate", "--system", "selkov", "--paths", "3", "--observations", "11", "--out", "s.csv"]);
    let csv = std::fs::read_to_string(d.join("s.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "series,time,x1,x2");
    assert_eq!(csv.lines().count(), 1 + 33);
    ok(d, &["--config", "s.csv.config.json", "--out", "t.csv"]);
    assert_eq!(csv, std::fs::read_to_string(d.join("t.csv")).unwrap());
}

#[test]
fn exit_codes_and_no_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["bogus"]), 2);
    assert_eq!(code(d, &["evaluate", "--system", "nope", "--truth", "--out", "x.json"]), 2);
    assert_eq!(code(d, &["train", "--data", "missing.ds", "--out", "x.ck"]), 3);
    std::fs::write(d.join("bad.csv"), "time,x1\n0,1\n0,2\n").unwrap();
    ok(d, &["generate", "--count", "2", "--dims", "1", "--out", "d.ds"]);
    assert_eq!(code(d, &["infer", "--checkpoint", "d.ds", "--context", "bad.csv", "--out", "x.json"]), 3);
    train(d, &["--steps", "1", "--out", "m.ck"]);
    assert_eq!(code(d, &["infer", "--checkpoint", "m.ck", "--context", "bad.csv", "--out", "x.json"]), 3);
    assert_eq!(code(d, &["train", "--data", "d.ds", "--lr", "-1", "--out", "x.ck"]), 2);
    let left: Vec<_> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert!(left.iter().all(|n| !n.starts_with('x') && !n.contains(".tmp-")), "{left:?}");
}
