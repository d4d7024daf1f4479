use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use molfuse::knowledge::load_embeddings;
use serde_json::{json, Value};

fn molfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_molfuse"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = molfuse(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// First `n` FreeSolv rows as a standalone CSV.
fn freesolv_head(dir: &Path, n: usize) -> PathBuf {
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/freesolv.csv");
    let text = fs::read_to_string(src).unwrap();
    let head: Vec<&str> = text.lines().take(n + 1).collect();
    let path = dir.join("small.csv");
    fs::write(&path, head.join("\n") + "\n").unwrap();
    path
}

fn dir_contents(dir: &Path) -> Vec<(String, String)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read_to_string(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn unknown_task_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = freesolv_head(tmp.path(), 3);
    let out = molfuse(&[
        "prompt",
        "--dataset",
        s(&csv),
        "--task",
        "tox21",
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("usage"));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = molfuse(&[
        "split",
        "--dataset",
        s(&tmp.path().join("nope.csv")),
        "--task",
        "freesolv",
        "--out",
        s(&tmp.path().join("splits.csv")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn prompts_are_rewritten_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = freesolv_head(tmp.path(), 12);
    let out = tmp.path().join("prompts");
    let first = ok_json(&[
        "prompt",
        "--dataset",
        s(&csv),
        "--task",
        "freesolv",
        "--out",
        s(&out),
    ]);
    assert_eq!(first["prompts"], 12);
    let a = dir_contents(&out);
    ok_json(&[
        "prompt",
        "--dataset",
        s(&csv),
        "--task",
        "freesolv",
        "--out",
        s(&out),
    ]);
    assert_eq!(a, dir_contents(&out));
    assert_eq!(a[0].0, "m00000.txt");
    assert!(a.iter().all(|(_, t)| !t.is_empty()));
}

#[test]
fn embeddings_round_trip_from_a_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let texts = tmp.path().join("texts.csv");
    fs::write(
        &texts,
        "id,text\na,polar and small\nb,\"a lipophilic, aromatic ring\"\n",
    )
    .unwrap();
    let out = tmp.path().join("emb");
    let v = ok_json(&[
        "embed",
        "--texts",
        s(&texts),
        "--dim",
        "24",
        "--out",
        s(&out),
    ]);
    assert_eq!(v["embedded"], 2);
    let store = load_embeddings(&out).unwrap();
    assert_eq!(store.len(), 2);
    let b = store.get("b").unwrap();
    assert_eq!(b.tokens.shape()[1], 24);
    assert_eq!(b.mask.len(), b.len());

    let again = tmp.path().join("emb2");
    ok_json(&[
        "embed",
        "--texts",
        s(&texts),
        "--dim",
        "24",
        "--out",
        s(&again),
    ]);
    assert_eq!(load_embeddings(&again).unwrap(), store);
}

#[test]
fn embed_names_the_offending_row() {
    let tmp = tempfile::tempdir().unwrap();
    let texts = tmp.path().join("texts.csv");
    fs::write(&texts, "id,text\na,fine\nb,\n").unwrap();
    let out = molfuse(&[
        "embed",
        "--texts",
        s(&texts),
        "--out",
        s(&tmp.path().join("emb")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("row 2"));
}

#[test]
fn split_writes_one_row_per_molecule() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = freesolv_head(tmp.path(), 50);
    let out = tmp.path().join("splits.csv");
    let v = ok_json(&[
        "split",
        "--dataset",
        s(&csv),
        "--task",
        "freesolv",
        "--seed",
        "4",
        "--out",
        s(&out),
    ]);
    assert_eq!(
        (v["train"].as_u64(), v["valid"].as_u64(), v["test"].as_u64()),
        (Some(40), Some(5), Some(5))
    );
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 51);
}

#[test]
fn train_eval_predict_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = freesolv_head(tmp.path(), 60);
    let prompts = tmp.path().join("prompts");
    let emb = tmp.path().join("emb");
    ok_json(&[
        "prompt",
        "--dataset",
        s(&csv),
        "--task",
        "freesolv",
        "--out",
        s(&prompts),
    ]);
    ok_json(&[
        "embed",
        "--texts",
        s(&prompts),
        "--dim",
        "16",
        "--out",
        s(&emb),
    ]);

    let config = tmp.path().join("run.json");
    let cfg = json!({
        "task": "freesolv",
        "data": csv,
        "model": {
            "variant": "full",
            "gin": {"layers": 2, "hidden": 16},
            "fusion": {"width": 16, "heads": 2},
        },
        "knowledge": {"provider": {"kind": "builtin", "dim": 16, "seed": 0}, "embeddings": emb},
        "train": {"epochs": 3, "batch_size": 16},
    });
    fs::write(&config, cfg.to_string()).unwrap();
    let run = tmp.path().join("run");
    let summary = ok_json(&[
        "train",
        "--config",
        s(&config),
        "--seed",
        "2",
        "--out",
        s(&run),
    ]);
    assert_eq!(summary["epochs_run"], 3);
    assert_eq!(summary["test"]["metric"], "rmse");
    let ckpt = run.join("best.ckpt");
    assert!(ckpt.is_file());

    let eval = ok_json(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&csv),
        "--embeddings",
        s(&emb),
    ]);
    assert_eq!(eval, summary["test"]);

    let args = [
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--smiles",
        "CCO",
        "--knowledge-text",
        "small polar alcohol",
    ];
    let p1 = ok_json(&args);
    assert_eq!(p1, ok_json(&args));
    assert_eq!(p1["variant"], "full");
    assert!(p1["outputs"][0]["value"].as_f64().unwrap().is_finite());

    let bad = molfuse(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--smiles",
        "C1CC",
        "--knowledge-text",
        "x",
    ]);
    assert_eq!(bad.status.code(), Some(3));
}

#[test]
fn bad_config_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("run.json");
    fs::write(
        &config,
        r#"{"task": "freesolv", "data": "x.csv", "trian": {}}"#,
    )
    .unwrap();
    let out = molfuse(&["train", "--config", s(&config)]);
    assert_eq!(out.status.code(), Some(2));
}
