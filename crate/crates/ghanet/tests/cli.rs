use std::path::Path;
use std::process::{Command, Output};

fn ghanet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ghanet"))
        .args(args)
        .arg("--quiet")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = ghanet(args);
    assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "train": {"epochs": 2, "width": 8, "gate_width": 8, "compressed": 8, "accumulation": 4},
  "synth": {"patients": 30, "min_patches": 5, "max_patches": 10, "dim": 6, "prototypes": 3,
            "genes_per_category": [2, 3, 3, 3, 4, 3]}
}"#;

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = ghanet(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn help_exits_cleanly() {
    assert_eq!(ghanet(&["--help"]).status.code(), Some(0));
}

#[test]
fn misspelled_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"train": {"epoch": 3}}"#).unwrap();
    let o = ghanet(&["synth", "--config", s(&cfg), "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
}

#[test]
fn invalid_config_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"sweep": {"k_percent": [0]}}"#).unwrap();
    let o = ghanet(&["synth", "--config", s(&cfg), "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("k_percent"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = ghanet(&["export-assoc", "--checkpoint", "nope.ghck", "--bag", "nope.ghb", "--out-dir", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nope.ghck"), "{}", stderr(&o));
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&["grad-check", "--out-dir", s(dir.path())]);
    assert!(out.contains("max relative error"));
    assert!(dir.path().join("grad_check.tsv").exists());
}

#[test]
fn synth_train_eval_km_export() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = s(&cfg);
    let (cohort, run) = (root.join("cohort"), root.join("run"));
    let manifest = cohort.join("manifest.json");

    ok(&["synth", "--config", cfg, "--out-dir", s(&cohort)]);
    for f in ["clinical.csv", "genomics.tsv", "gene_categories.tsv", "planted.tsv", "bags/SYN-0001.ghb"] {
        assert!(cohort.join(f).exists(), "{f}");
    }

    ok(&["select-genes", "--config", cfg, "--manifest", s(&manifest), "--fold", "1", "--out-dir", s(&run)]);
    assert!(run.join("selection.tsv").exists());

    let out = ok(&["train", "--config", cfg, "--manifest", s(&manifest), "--out-dir", s(&run)]);
    assert!(out.contains("final training loss"), "{out}");
    let ckpt = run.join("model.ghck");

    let eval = root.join("eval");
    let out = ok(&[
        "eval",
        "--config",
        cfg,
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&ckpt),
        "--spearman",
        "--out-dir",
        s(&eval),
    ]);
    assert!(out.contains("c-index"), "{out}");
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(eval.join("eval.json")).unwrap()).unwrap();
    assert_eq!(metrics["patients"], 30);
    assert!(metrics["spearman"].is_array());

    let km = root.join("km");
    ok(&["km", "--predictions", s(&eval.join("predictions.tsv")), "--out-dir", s(&km)]);
    let km_text = std::fs::read_to_string(km.join("km.tsv")).unwrap();
    assert!(km_text.starts_with("group\ttime\tsurvival\tat_risk\n"));

    let assoc = root.join("assoc");
    ok(&[
        "export-assoc",
        "--checkpoint",
        s(&ckpt),
        "--bag",
        s(&cohort.join("bags/SYN-0001.ghb")),
        "--out-dir",
        s(&assoc),
    ]);
    let text = std::fs::read_to_string(assoc.join("associations.tsv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 18);

    let o = ghanet(&["train", "--config", cfg, "--manifest", s(&manifest), "--fold", "9", "--out-dir", s(&run)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("fold 9"), "{}", stderr(&o));
}
