use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use circuitfn::corpus::{generate_random_tree, read_dataset, to_jsonl, DatasetRecord};
use circuitfn::graph::reconvergence_example;
use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_circuitfn"));
    c.env_remove("CIRCUITFN_SEED");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn write_records(path: &Path, records: &[DatasetRecord]) {
    fs::write(path, to_jsonl(records)).unwrap();
}

fn small_config(dir: &Path, dataset: &str, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    let text = format!(
        "model.d_model = 16\nmodel.n_heads = 2\nmodel.n_layers = 1\ntrain.batch_size = 4\n\
         paths.dataset = {dataset}\npaths.checkpoint = model.ckpt\npaths.report = report.json\n{extra}"
    );
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn gen_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = ["gen", "--n-circuits", "100", "--pis", "6", "--gates", "30", "--seed", "1"];
    ok(d, &[&args[..], &["--out", "a.jsonl"]].concat());
    ok(d, &[&args[..], &["--out", "b.jsonl", "--jobs", "1"]].concat());
    let a = fs::read(d.join("a.jsonl")).unwrap();
    assert_eq!(a, fs::read(d.join("b.jsonl")).unwrap());
    assert_eq!(read_dataset(&d.join("a.jsonl")).unwrap().len(), 100);
}

#[test]
fn seed_env_overrides_flag() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--n-circuits", "5", "--pis", "4", "--gates", "10", "--seed", "9", "--out", "a.jsonl"]);
    let out = bin()
        .current_dir(d)
        .env("CIRCUITFN_SEED", "9")
        .args(["gen", "--n-circuits", "5", "--pis", "4", "--gates", "10", "--seed", "1", "--out", "b.jsonl"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(d.join("a.jsonl")).unwrap(), fs::read(d.join("b.jsonl")).unwrap());
}

#[test]
fn zero_pis_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["gen", "--n-circuits", "3", "--pis", "0", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("--pis"));
}

#[test]
fn sequential_records_carry_latches() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--n-circuits", "10", "--pis", "3", "--gates", "12", "--sequential", "--latches", "2", "--out", "s.jsonl"]);
    for r in read_dataset(&d.join("s.jsonl")).unwrap() {
        assert_eq!(r.circuit().unwrap().pseudo_pis().len(), 2);
    }
}

#[test]
fn missing_input_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["label", "--in", "nope.jsonl", "--out", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn label_reconvergence_and_identity_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let g = reconvergence_example(0.5);
    write_records(&d.join("r.jsonl"), &[DatasetRecord::from_circuit("recon", &g).unwrap()]);
    ok(d, &["label", "--in", "r.jsonl", "--out", "l.jsonl", "--tasks", "prob,shift,sim", "--sim-identity"]);
    let rec = &read_dataset(&d.join("l.jsonl")).unwrap()[0];
    let c = *g.outputs().last().unwrap();
    let labels = rec.labels.as_ref().unwrap();
    assert_eq!(labels.global_prob.as_ref().unwrap()[c], 0.125);
    assert_eq!(labels.local_prob.as_ref().unwrap()[c], 0.0625);
    assert_eq!(labels.shift.as_ref().unwrap()[c], 0.0625);
    let identities: Vec<_> = rec.sim_pairs.as_ref().unwrap().iter().filter(|p| p.0 == p.1).collect();
    assert!(!identities.is_empty());
    assert!(identities.iter().all(|p| p.2 == 1.0));
}

#[test]
fn transition_on_combinational_fails() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--n-circuits", "3", "--pis", "3", "--gates", "6", "--out", "c.jsonl"]);
    let out = run(d, &["label", "--in", "c.jsonl", "--out", "t.jsonl", "--tasks", "transition"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("NotSequential"));
    assert!(!d.join("t.jsonl").exists());
}

#[test]
fn train_fsl_on_trees_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let trees: Vec<_> =
        (0..12).map(|i| DatasetRecord::from_circuit(format!("t{i}"), &generate_random_tree(5, 0.3, 0.5, i)).unwrap()).collect();
    write_records(&d.join("trees.jsonl"), &trees);
    ok(d, &["label", "--in", "trees.jsonl", "--out", "l.jsonl"]);
    let cfg = small_config(d, "l.jsonl", "train.epochs = 40\n");
    ok(d, &["train", "fsl", "--config", cfg.to_str().unwrap()]);
    let first = json(&d.join("report.json"));
    assert!(first["metrics"]["final_loss"].as_f64().unwrap() < 0.01, "{first}");
    assert!(d.join("model.ckpt").exists());
    let csv = fs::read_to_string(d.join("report.csv")).unwrap();
    assert!(csv.starts_with("epoch,loss\n"));
    assert_eq!(csv.lines().count(), 41);

    ok(d, &["train", "fsl", "--config", cfg.to_str().unwrap()]);
    let second = json(&d.join("report.json"));
    assert_eq!(first["metrics"], second["metrics"]);
    assert_eq!(first["config_hash"], second["config_hash"]);
}

#[test]
fn missing_shift_labels_name_the_channel() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--n-circuits", "4", "--pis", "3", "--gates", "6", "--out", "raw.jsonl"]);
    let cfg = small_config(d, "raw.jsonl", "train.epochs = 1\n");
    let out = run(d, &["train", "fsl", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("shift"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--n-circuits", "2", "--pis", "3", "--gates", "4", "--out", "raw.jsonl"]);
    let cfg = small_config(d, "raw.jsonl", "train.learning_rate = 0.1\n");
    let out = run(d, &["train", "fsl", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("train.learning_rate"));
}

#[test]
fn divergent_training_exits_with_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--n-circuits", "8", "--pis", "4", "--gates", "12", "--out", "raw.jsonl"]);
    ok(d, &["label", "--in", "raw.jsonl", "--out", "l.jsonl"]);
    let cfg = small_config(d, "l.jsonl", "train.epochs = 20\ntrain.lr = 1e38\ntrain.grad_clip = 0\n");
    let out = run(d, &["train", "fsl", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(stderr(&out).contains("epoch"));
}

#[test]
fn eval_fsl_with_oracle_shift_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--n-circuits", "20", "--pis", "4..8", "--gates", "10..40", "--seed", "3", "--out", "raw.jsonl"]);
    ok(d, &["label", "--in", "raw.jsonl", "--out", "l.jsonl"]);
    ok(d, &["eval", "fsl", "--oracle-shift", "--dataset", "l.jsonl", "--out", "e.json"]);
    let report = json(&d.join("e.json"));
    assert!(report["metrics"]["mae"].as_f64().unwrap() <= 1e-9, "{report}");
    assert_eq!(report["metrics"]["clamp_count"].as_f64(), Some(0.0));
}

#[test]
fn stats_on_aig_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--n-circuits", "30", "--pis", "6", "--gates", "20..40", "--out", "raw.jsonl"]);
    ok(d, &["stats", "--dataset", "raw.jsonl", "--out", "s.json"]);
    let report = json(&d.join("s.json"));
    let hist = report["metrics"]["in_degree_histogram"].as_object().unwrap();
    assert!(hist.keys().all(|k| ["0", "1", "2"].contains(&k.as_str())), "{hist:?}");
    let overhead = report["metrics"]["padding_overhead"].as_f64().unwrap();
    assert!((0.0..0.5).contains(&overhead));
}

#[test]
fn null_model_retrieval_matches_chance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--n-circuits", "1200", "--pis", "3", "--gates", "3", "--out", "raw.jsonl"]);
    ok(d, &["eval", "retrieval", "--null-model", "--pool", "64", "--dataset", "raw.jsonl", "--out", "e.json"]);
    let report = json(&d.join("e.json"));
    let r1 = report["metrics"]["recall@1"].as_f64().unwrap();
    assert!((r1 - 1.0 / 64.0).abs() <= 0.01, "recall@1 {r1}");
    let r5 = report["metrics"]["recall@5"].as_f64().unwrap();
    let r10 = report["metrics"]["recall@10"].as_f64().unwrap();
    assert!(r1 <= r5 && r5 <= r10);
}

#[test]
fn infer_writes_one_line_per_record() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--n-circuits", "6", "--pis", "4", "--gates", "10", "--out", "raw.jsonl"]);
    ok(d, &["infer", "--zero-shift", "--dataset", "raw.jsonl", "--out", "p.jsonl"]);
    let text = fs::read_to_string(d.join("p.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 6);
    for line in text.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        assert!(v["probs"].as_array().unwrap().iter().all(|p| (0.0..=1.0).contains(&p.as_f64().unwrap())));
    }
}

#[test]
fn trained_checkpoint_round_trips_through_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen", "--n-circuits", "8", "--pis", "4", "--gates", "12", "--pi-p-range", "0.2..0.8", "--out", "raw.jsonl"]);
    ok(d, &["label", "--in", "raw.jsonl", "--out", "l.jsonl"]);
    let cfg = small_config(d, "l.jsonl", "train.epochs = 2\n");
    ok(d, &["train", "fsl", "--config", cfg.to_str().unwrap()]);
    let train = json(&d.join("report.json"));
    ok(d, &["eval", "fsl", "--checkpoint", "model.ckpt", "--dataset", "l.jsonl", "--out", "e.json"]);
    let eval = json(&d.join("e.json"));
    assert_eq!(train["config_hash"], eval["config_hash"]);
    assert!(eval["metrics"]["mae"].as_f64().unwrap().is_finite());
    ok(d, &["infer", "--checkpoint", "model.ckpt", "--dataset", "l.jsonl", "--out", "p.jsonl"]);
}
