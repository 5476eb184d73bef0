use std::path::Path;
use std::process::{Command, Output};

fn invcook(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_invcook"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run invcook")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = invcook(dir, args);
    assert!(
        out.status.success(),
        "invcook {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const SPEC: &str = r#"{"n_samples": 60, "n_ingredients": 8, "max_card": 4, "pairs": [[0, 1]], "positions": 4, "dim": 16}"#;

const CONFIG: &str = r#"{
  "model": {
    "max_ingredients": 4,
    "ingredient_decoder": {"n_blocks": 1, "n_heads": 2, "head_dim": 8, "ffn_mult": 2},
    "instruction_decoder": {"n_blocks": 1, "n_heads": 2, "head_dim": 8, "ffn_mult": 2}
  },
  "train": {"max_epochs": 2, "batch_size": 8}
}"#;

fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("spec.json"), SPEC).unwrap();
    std::fs::write(dir.path().join("config.json"), CONFIG).unwrap();
    ok(dir.path(), &["synth", "--spec", "spec.json", "--out", "data", "--seed", "3"]);
    ok(dir.path(), &["build-vocab", "--data", "data/train.jsonl", "--out", "vocab"]);
    dir
}

fn train_stage1(dir: &Path, kind: &str) {
    ok(
        dir,
        &[
            "train-ingredients", "--data", "data/train.jsonl", "--val", "data/val.jsonl", "--vocab", "vocab",
            "--ingredient-model", kind, "--config", "config.json", "--out", "s1.ckpt",
        ],
    );
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = prepared();
    let dir = tmp.path();
    for f in ["ingredients.tsv", "merge_log.tsv", "words.tsv"] {
        assert!(dir.join("vocab").join(f).is_file(), "{f}");
    }
    train_stage1(dir, "tf-set");
    ok(
        dir,
        &[
            "train-recipe", "--data", "data/train.jsonl", "--val", "data/val.jsonl", "--model", "s1.ckpt",
            "--strategy", "seq-img", "--config", "config.json", "--out", "s2.ckpt",
        ],
    );
    ok(
        dir,
        &["generate", "--model", "s2.ckpt", "--ingredients-model", "s1.ckpt", "--data", "data/test.jsonl", "--out", "gen.jsonl"],
    );
    let gen = std::fs::read_to_string(dir.join("gen.jsonl")).unwrap();
    let n_test = std::fs::read_to_string(dir.join("data/test.jsonl")).unwrap().lines().count();
    assert_eq!(gen.lines().count(), n_test);
    for line in gen.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["id", "title", "ingredients", "instructions", "truncated"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
        assert!(!v["ingredients"].as_array().unwrap().is_empty());
    }

    ok(dir, &["evaluate", "--model", "s1.ckpt", "--data", "data/test.jsonl", "--report", "r1.json"]);
    let r1: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("r1.json")).unwrap()).unwrap();
    let f1 = r1["f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    let keys: Vec<&String> = r1["p_at_k"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["1", "5"]);

    let out = ok(dir, &["evaluate", "--model", "s2.ckpt", "--data", "data/test.jsonl"]);
    let r2: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(r2["perplexity"].as_f64().unwrap() >= 1.0);
    assert!(r2["f1"].is_null());
}

#[test]
fn single_image_generation_and_ablation() {
    let tmp = prepared();
    let dir = tmp.path();
    train_stage1(dir, "ff-bce");
    ok(
        dir,
        &[
            "train-recipe", "--data", "data/train.jsonl", "--val", "data/val.jsonl", "--model", "s1.ckpt",
            "--ablation", "i2r", "--config", "config.json", "--out", "i2r.ckpt",
        ],
    );
    let image = std::fs::read_dir(dir.join("data/features")).unwrap().next().unwrap().unwrap().path();
    let image = image.to_str().unwrap();
    let out = ok(dir, &["generate", "--model", "i2r.ckpt", "--image", image]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["ingredients"].as_array().unwrap().is_empty());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(invcook(dir, &["--help"]).status.code(), Some(0));
    assert_eq!(invcook(dir, &["--version"]).status.code(), Some(0));
    assert_eq!(invcook(dir, &["bake"]).status.code(), Some(1));
    assert_eq!(invcook(dir, &["synth"]).status.code(), Some(1));
    assert_eq!(invcook(dir, &["evaluate", "--model", "missing.ckpt", "--data", "x.jsonl"]).status.code(), Some(1));
    assert_eq!(
        invcook(dir, &["train-recipe", "--data", "a", "--val", "b", "--model", "c", "--out", "d", "--strategy", "sideways"])
            .status
            .code(),
        Some(1)
    );
    std::fs::write(dir.join("bad.ckpt"), b"ICKP\x07\x00").unwrap();
    let out = invcook(dir, &["evaluate", "--model", "bad.ckpt", "--data", "x.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}
