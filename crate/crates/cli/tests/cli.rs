//! End-to-end command tests against the built binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_phqtrack"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("phqtrack-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.txt");
    fs::write(&path, body).unwrap();
    path
}

/// Small-but-real generator settings shared by the command tests.
const TINY_GEN: &str = "gen.n_clients = 12\ngen.turns_per_session = 3\ngen.d_e = 8\ngen.f = 4\n";
const TINY_MODEL: &str = "model.d = 8\nmodel.heads = 2\nmodel.d_ff = 16\nmodel.l_enc = 1\n\
model.l_dec = 1\nmodel.f = 4\nmodel.memory_slots = 4\nmodel.score_mlp_hidden = 4\n";

fn gen_fixtures(dir: &Path, extra: &str) -> (PathBuf, PathBuf) {
    let config = write_config(dir, &format!("{TINY_GEN}{extra}"));
    let out = run(&[
        "gen-fixtures",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    (dir.join("corpus.jsonl"), dir.join("splits.json"))
}

#[test]
fn gen_fixtures_writes_expected_files_and_counts() {
    let dir = tmp("gen");
    let (corpus, splits) = gen_fixtures(&dir, "");
    assert!(corpus.exists() && splits.exists());
    assert!(dir.join("run_manifest.json").exists());
    // 12 clients × 5 sessions, plus the header line.
    let lines = fs::read_to_string(&corpus).unwrap().lines().count();
    assert_eq!(lines, 1 + 12 * 5);
}

#[test]
fn gen_fixtures_same_seed_is_byte_identical() {
    let dir_a = tmp("gen-det-a");
    let dir_b = tmp("gen-det-b");
    let (ca, sa) = gen_fixtures(&dir_a, "gen.seed = 77\n");
    let (cb, sb) = gen_fixtures(&dir_b, "gen.seed = 77\n");
    assert_eq!(fs::read(ca).unwrap(), fs::read(cb).unwrap());
    assert_eq!(fs::read(sa).unwrap(), fs::read(sb).unwrap());
}

#[test]
fn gen_fixtures_invalid_ratios_exit_one_naming_key() {
    let dir = tmp("gen-bad");
    let config = write_config(&dir, "gen.split_ratios = 0.5, 0.1, 0.1\n");
    let out = run(&[
        "gen-fixtures",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gen.split_ratios"), "{err}");
}

fn train_config(dir: &Path) -> PathBuf {
    write_config(
        dir,
        &format!("{TINY_GEN}{TINY_MODEL}train.max_epochs = 3\ntrain.batch_size = 8\n"),
    )
}

#[test]
fn train_and_eval_round_trip() {
    let dir = tmp("train");
    let (corpus, splits) = gen_fixtures(&dir, "");
    let config = train_config(&dir);
    let out_dir = dir.join("run");
    let out = run(&[
        "train",
        "--data",
        corpus.to_str().unwrap(),
        "--manifest",
        splits.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "0",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let ckpt = out_dir.join("checkpoint_seed0.ckpt");
    assert!(ckpt.exists());
    assert!(out_dir.join("train_log_seed0.jsonl").exists());
    assert!(out_dir.join("run_manifest.json").exists());

    // The log is JSONL with the documented fields.
    let log = fs::read_to_string(out_dir.join("train_log_seed0.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "train_loss", "val_loss", "val_mae", "lr", "seconds"] {
        assert!(first.get(key).is_some(), "missing log field {key}");
    }

    let eval_dir = dir.join("eval");
    let out = run(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        corpus.to_str().unwrap(),
        "--manifest",
        splits.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("report.json")).unwrap()).unwrap();
    for key in ["target", "config_fingerprint", "mean_mae", "seeds"] {
        assert!(report.get(key).is_some(), "missing report field {key}");
    }
    // Single checkpoint: no std column.
    assert!(report.get("std_mae").is_none());
    // Predictions are persisted so the MAE is recomputable.
    let preds = report["seeds"][0]["predictions"].as_array().unwrap();
    assert!(!preds.is_empty());
    let recomputed: f64 = preds
        .iter()
        .map(|p| {
            (p["predicted_total"].as_f64().unwrap() - p["target_total"].as_f64().unwrap()).abs()
        })
        .sum::<f64>()
        / preds.len() as f64;
    let reported = report["seeds"][0]["overall_mae"].as_f64().unwrap();
    assert!((recomputed - reported).abs() < 1e-9);
}

#[test]
fn train_same_seed_twice_identical_checkpoints() {
    let dir = tmp("train-det");
    let (corpus, splits) = gen_fixtures(&dir, "");
    let config = train_config(&dir);
    let run_once = |name: &str| -> Vec<u8> {
        let out_dir = dir.join(name);
        let out = run(&[
            "train",
            "--data",
            corpus.to_str().unwrap(),
            "--manifest",
            splits.to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--seed",
            "0",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_ok(&out);
        fs::read(out_dir.join("checkpoint_seed0.ckpt")).unwrap()
    };
    assert_eq!(run_once("a"), run_once("b"));
}

#[test]
fn train_missing_labels_is_a_data_error() {
    let dir = tmp("train-nolabel");
    let (corpus, splits) = gen_fixtures(&dir, "");
    // Strip labels from every line.
    let text = fs::read_to_string(&corpus).unwrap();
    let stripped: Vec<String> = text
        .lines()
        .map(|line| {
            if line.contains("client_id") {
                let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
                v["labels"] = serde_json::Value::Null;
                serde_json::to_string(&v).unwrap()
            } else {
                line.to_string()
            }
        })
        .collect();
    let nolabel = dir.join("nolabel.jsonl");
    fs::write(&nolabel, stripped.join("\n") + "\n").unwrap();

    let config = train_config(&dir);
    let out = run(&[
        "train",
        "--data",
        nolabel.to_str().unwrap(),
        "--manifest",
        splits.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "0",
        "--out",
        dir.join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("labels"), "{err}");
}

#[test]
fn eval_dimension_mismatch_names_both_sides() {
    let dir = tmp("eval-dim");
    let (corpus, splits) = gen_fixtures(&dir, "");
    let config = train_config(&dir);
    let out_dir = dir.join("run");
    assert_ok(&run(&[
        "train",
        "--data",
        corpus.to_str().unwrap(),
        "--manifest",
        splits.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "0",
        "--out",
        out_dir.to_str().unwrap(),
    ]));

    // A corpus with a different embedding width.
    let dir2 = tmp("eval-dim-2");
    let config2 = write_config(
        &dir2,
        "gen.n_clients = 12\ngen.turns_per_session = 3\ngen.d_e = 12\ngen.f = 4\n",
    );
    assert_ok(&run(&[
        "gen-fixtures",
        "--config",
        config2.to_str().unwrap(),
        "--out",
        dir2.to_str().unwrap(),
    ]));
    let corpus2 = dir2.join("corpus.jsonl");
    let out = run(&[
        "eval",
        "--checkpoint",
        out_dir.join("checkpoint_seed0.ckpt").to_str().unwrap(),
        "--data",
        corpus2.to_str().unwrap(),
        "--manifest",
        splits.to_str().unwrap(),
        "--out",
        dir.join("eval").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("12") && err.contains('8'), "should name both dims: {err}");
}

#[test]
fn eval_empty_test_split_errors() {
    let dir = tmp("eval-empty");
    let (corpus, splits) = gen_fixtures(&dir, "");
    // Rewrite the manifest with every trajectory in train.
    let mut manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&splits).unwrap()).unwrap();
    let ids: Vec<String> =
        manifest["assignments"].as_object().unwrap().keys().cloned().collect();
    for id in ids {
        manifest["assignments"][&id] = serde_json::Value::String("train".into());
    }
    fs::write(&splits, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();

    let config = train_config(&dir);
    let out_dir = dir.join("run");
    // Training still works (val split missing -> error is also fine), so
    // train against the original splits first.
    let splits_orig = dir.join("splits_orig.json");
    let (_, splits2) = gen_fixtures(&tmp("eval-empty-orig"), "");
    fs::copy(&splits2, &splits_orig).unwrap();
    assert_ok(&run(&[
        "train",
        "--data",
        corpus.to_str().unwrap(),
        "--manifest",
        splits_orig.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "0",
        "--out",
        out_dir.to_str().unwrap(),
    ]));
    let out = run(&[
        "eval",
        "--checkpoint",
        out_dir.join("checkpoint_seed0.ckpt").to_str().unwrap(),
        "--data",
        corpus.to_str().unwrap(),
        "--manifest",
        splits.to_str().unwrap(),
        "--out",
        dir.join("eval").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_is_deterministic() {
    let a = run(&["gradcheck", "--seed", "0"]);
    assert_ok(&a);
    let stdout = String::from_utf8_lossy(&a.stdout);
    assert!(stdout.contains("PASS"), "{stdout}");
    let b = run(&["gradcheck", "--seed", "0"]);
    assert_eq!(a.stdout, b.stdout, "worst-error line should be identical across runs");
}

#[test]
fn gradcheck_negative_control_fails_naming_op() {
    let out = run(&["gradcheck", "--seed", "0", "--corrupt", "sigmoid"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sigmoid"), "{err}");
}

#[test]
fn ablate_unknown_axis_is_usage_error() {
    let dir = tmp("ablate-bad");
    let (corpus, splits) = gen_fixtures(&dir, "");
    let out = run(&[
        "ablate",
        "--axis",
        "nonsense",
        "--grid",
        "a,b",
        "--data",
        corpus.to_str().unwrap(),
        "--manifest",
        splits.to_str().unwrap(),
        "--out",
        dir.join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonsense"));
}

#[test]
fn ablate_memory_mechanism_three_rows() {
    let dir = tmp("ablate");
    let (corpus, splits) = gen_fixtures(&dir, "");
    let config = write_config(
        &dir,
        &format!("{TINY_GEN}{TINY_MODEL}train.max_epochs = 2\ntrain.batch_size = 8\n"),
    );
    let out_dir = dir.join("out");
    let out = run(&[
        "ablate",
        "--axis",
        "memory-mechanism",
        "--grid",
        "none,summary,summary+retrieval",
        "--data",
        corpus.to_str().unwrap(),
        "--manifest",
        splits.to_str().unwrap(),
        "--config",
        config.to_str().unwrap(),
        "--seeds",
        "0,1",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_ok(&out);
    let table: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("ablation.json")).unwrap()).unwrap();
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for row in rows {
        assert!(row["std_mae"].as_f64().is_some(), "two seeds give a std column");
    }
    let csv = fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn unknown_command_and_missing_flags_are_usage_errors() {
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["train", "--data"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&[]);
    assert_eq!(out.status.code(), Some(1));
}
