use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn gbt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gbt"))
        .args(args)
        .output()
        .expect("gbt runs")
}

fn json_of(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn presets_lists_all_five() {
    let v = json_of(&gbt(&["presets", "--json"]));
    let names: Vec<&str> = v.as_array().unwrap().iter().map(|r| r["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["uniter", "visualbert", "vl-bert", "vilbert", "lxmert"]);
}

#[test]
fn untied_streams_have_more_encoder_parameters() {
    let enc = |preset: &str| json_of(&gbt(&["params", "--preset", preset, "--json"]))["encoder_params"].as_u64().unwrap();
    assert!(enc("vilbert") > enc("uniter"));
}

#[test]
fn check_equivalence_reports_tiny_deviation() {
    let out = gbt(&["check-equivalence", "--preset", "uniter", "--seed", "0", "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json_of(&out);
    assert!(v["max_abs_dev"].as_f64().unwrap() < 1e-10);
    assert_eq!(v["passed"], Value::Bool(true));
}

#[test]
fn zero_tolerance_fails_the_check() {
    let out = gbt(&["check-equivalence", "--preset", "uniter", "--draws", "2", "--tolerance", "0"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("CheckFailed"));
}

#[test]
fn usage_and_domain_errors_have_distinct_codes() {
    assert_eq!(gbt(&["params", "--preset", "uniter", "--bogus"]).status.code(), Some(2));
    assert_eq!(gbt(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(gbt(&["params"]).status.code(), Some(2));
    let out = gbt(&["params", "--preset", "bert"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("UnknownPreset"));
    let out = Command::new(env!("CARGO_BIN_EXE_gbt"))
        .args(["presets"])
        .env("GBT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn config_file_and_flags_layer_over_the_preset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("arch.json");
    fs::write(&cfg, r#"{"preset": "vilbert", "dims": {"d": 32, "h": 4, "ff": 64}}"#).unwrap();
    let from_file = json_of(&gbt(&["params", "--config", p(&cfg), "--json"]));
    assert_eq!(from_file["arch"], "vilbert");
    let flag_wins = json_of(&gbt(&["params", "--config", p(&cfg), "--preset", "uniter", "--json"]));
    assert_eq!(flag_wins["arch"], "uniter");
    assert!(flag_wins["total"].as_u64() < from_file["total"].as_u64());
    fs::write(&cfg, r#"{"dims": {"d": 30, "h": 4}}"#).unwrap();
    let out = gbt(&["params", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("HeadDivisibility"));
}

#[test]
fn analyze_flags_disjoint_models() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture("disjoint.csv");
    let v = json_of(&gbt(&["analyze", "--input", p(&input), "--alpha", "0.001", "--out", p(dir.path()), "--json"]));
    let c = &v["comparison"];
    assert_eq!(c["pairs_tested"], 1);
    assert_eq!(c["significant"][0][1], Value::Bool(true));
    assert_eq!(c["p_values"][0][1].as_f64().unwrap(), 2.0 / 184_756.0);
    let matrix = fs::read_to_string(dir.path().join("significance.csv")).unwrap();
    assert_eq!(matrix, "model,low,high\nlow,0,1\nhigh,1,0\n");
    assert!(dir.path().join("pvalues.json").exists());
    assert!(dir.path().join("summary.csv").exists());
    let human = gbt(&["analyze", "--input", p(&input)]);
    assert!(String::from_utf8_lossy(&human.stdout).contains("low vs high"));
}

#[test]
fn analyze_runs_on_the_demo_scores() {
    let demo = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/demo/vqav2.csv");
    let v = json_of(&gbt(&["analyze", "--input", p(&demo), "--json"]));
    assert_eq!(v["summary"].as_array().unwrap().len(), 5);
    assert_eq!(v["comparison"]["pairs_tested"], 0);
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        json_of(&gbt(&["gen-data", "--out", p(d), "--n-pairs", "50", "--heldout", "10", "--seed", "4", "--json"]));
    }
    for f in ["features.vfr", "captions.tsv", "vocab.txt", "synth.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let bad = gbt(&["gen-data", "--out", p(&dir.path().join("c")), "--task", "colour"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn encode_reports_hidden_shapes() {
    let v = json_of(&gbt(&["encode", "--preset", "lxmert", "--json"]));
    let tl = v["text_shape"].as_array().unwrap();
    assert_eq!(tl[1], 64);
    assert_eq!(v["vision_shape"][0], 9);
    assert_eq!(v["hidden_text"].as_array().unwrap().len() as u64, tl[0].as_u64().unwrap());
}

#[test]
fn grad_check_reports_its_probes() {
    let out = gbt(&["grad-check", "--preset", "uniter", "--probes", "10", "--json"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["probes"], 10);
    let passed = v["passed"].as_bool().unwrap();
    assert_eq!(out.status.code(), Some(if passed { 0 } else { 1 }));
}

#[test]
fn pretrain_evaluate_and_checkpoint_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    json_of(&gbt(&["gen-data", "--out", p(&data), "--n-pairs", "60", "--heldout", "20", "--json"]));
    let run = |out: &Path| {
        gbt(&["pretrain", "--preset", "uniter", "--data", p(&data), "--out", p(out), "--steps", "3", "--batch-size", "4", "--json"])
    };
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    let v = json_of(&run(&r1));
    assert_eq!(v["steps"], 3);
    json_of(&run(&r2));
    for f in ["manifest.json", "params.bin", "history.jsonl", "arch.json", "train.json"] {
        assert_eq!(fs::read(r1.join(f)).unwrap(), fs::read(r2.join(f)).unwrap(), "{f}");
    }

    let v = json_of(&gbt(&["evaluate", "--checkpoint", p(&r1), "--data", p(&data), "--json"]));
    assert_eq!(v["report"]["pairs"], 40);

    let out = gbt(&["evaluate", "--preset", "vilbert", "--checkpoint", p(&r1), "--data", p(&data)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ShapeMismatch"));

    let ft = dir.path().join("ft");
    let v = json_of(&gbt(&["finetune", "--checkpoint", p(&r1), "--data", p(&data), "--out", p(&ft), "--steps", "2", "--seed", "7", "--json"]));
    assert_eq!(v["steps"], 2);

    let blob = r1.join("params.bin");
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
    let out = gbt(&["evaluate", "--checkpoint", p(&r1), "--data", p(&data)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("CorruptManifest"));
}
