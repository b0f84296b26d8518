use std::path::Path;
use std::process::{Command, Output};

use bake_kit::bake::{build_soft_targets, BakeConfig};
use bake_kit::cli::top_k;
use bake_kit::losses::temperature_probs;
use bake_kit::numerics::Tensor;
use serde_json::Value;

fn bake_kit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bake-kit")).args(args).output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL: &[&str] = &["--synth-per-class", "40", "--synth-dim", "8", "--epochs", "2"];

fn with<'a>(head: &[&'a str], tail: &[&'a str]) -> Vec<&'a str> {
    head.iter().chain(tail).copied().collect()
}

#[test]
fn train_writes_one_record_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let args = with(
        &[
            "train", "--method", "bake", "--omega", "0.5", "--tau", "4", "--lambda", "1", "--m", "1", "--dataset",
            "synth", "--out-dir",
        ],
        &[out_dir.to_str().unwrap()],
    );
    let out = bake_kit(&with(&args, &["--epochs", "3", "--synth-per-class", "40"]));
    assert!(out.status.success(), "{}", stderr(&out));

    let metrics = std::fs::read_to_string(out_dir.join("metrics.jsonl")).unwrap();
    let records: Vec<Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 3);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["epoch"], i);
        let (loss, ce, kl) = (r["train_loss"].as_f64().unwrap(), r["train_ce"].as_f64().unwrap(), r["train_kl"].as_f64().unwrap());
        assert!((loss - (ce + kl)).abs() <= 1e-6);
        let (t1, t5) = (r["test_top1"].as_f64().unwrap(), r["test_top5"].as_f64().unwrap());
        assert!((0.0..=1.0).contains(&t1) && t1 <= t5 && t5 <= 1.0);
    }
    let timing = std::fs::read_to_string(out_dir.join("timing.jsonl")).unwrap();
    assert_eq!(timing.lines().count(), 3);

    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["train"]["bake"]["omega"], 0.5);
    assert_eq!(manifest["config"]["train"]["method"], "bake");
    assert_eq!(manifest["dataset"]["train_fingerprint"].as_str().unwrap().len(), 64);
    assert!(out_dir.join("model.ckpt").exists());
}

#[test]
fn out_of_range_omega_exits_2() {
    let out = bake_kit(&["train", "--method", "bake", "--omega", "1.5", "--epochs", "1"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("[0,1]"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn unparseable_flags_exit_2() {
    for args in [
        &["train", "--method", "distill"][..],
        &["train", "--mode", "iterate:x"],
        &["train", "--lr", "-1"],
        &["train", "--schedule", "step:5,3:0.1"],
        &["train", "--tau", "0"],
        &["bogus"],
    ] {
        let out = bake_kit(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", stderr(&out));
        assert_eq!(stderr(&out).trim_end().lines().count(), 1, "{args:?}: {}", stderr(&out));
    }
}

#[test]
fn missing_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let out = bake_kit(&["targets", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert_eq!(stderr(&out).trim_end().lines().count(), 1);

    let img = dir.path().join("img.idx");
    let out = bake_kit(&[
        "train", "--dataset", "idx", "--train-images", img.to_str().unwrap(), "--train-labels", "x", "--test-images",
        "y", "--test-labels", "z",
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));

    let out = bake_kit(&["train", "--dataset", "idx"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn help_shows_distillation_defaults() {
    let out = bake_kit(&["train", "--help"]);
    assert!(out.status.success());
    let help = stdout(&out);
    for default in ["[default: 0.5]", "[default: 4]", "[default: 1]", "[default: closed]", "[default: pred]"] {
        assert!(help.contains(default), "{default} missing");
    }
}

#[test]
fn compare_writes_one_row_per_method() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("cmp");
    let out = bake_kit(&with(
        &["compare", "--methods", "vanilla;bake", "--seeds", "2", "--out-dir", out_dir.to_str().unwrap()],
        SMALL,
    ));
    assert!(out.status.success(), "{}", stderr(&out));
    let table = std::fs::read_to_string(out_dir.join("summary.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("vanilla\t2\t"));
    assert!(rows[1].starts_with("bake\t2\t"));
    assert!(out_dir.join("01-bake").join("seed-1").join("metrics.jsonl").exists());
}

#[test]
fn compare_sweeps_omega() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("sweep");
    let methods = "bake:omega=0.0;bake:omega=0.1;bake:omega=0.5;bake:omega=0.9";
    let out = bake_kit(&with(
        &["compare", "--methods", methods, "--seeds", "1", "--out-dir", out_dir.to_str().unwrap()],
        SMALL,
    ));
    assert!(out.status.success(), "{}", stderr(&out));
    let table = std::fs::read_to_string(out_dir.join("summary.tsv")).unwrap();
    let labels: Vec<&str> = table.lines().skip(1).map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(labels, methods.split(';').collect::<Vec<_>>());
}

#[test]
fn compare_rejects_empty_method_list() {
    let out = bake_kit(&["compare", "--methods", " ; "]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

fn train_small(dir: &Path) -> std::path::PathBuf {
    let out_dir = dir.join("run");
    let out = bake_kit(&with(&["train", "--out-dir", out_dir.to_str().unwrap()], SMALL));
    assert!(out.status.success(), "{}", stderr(&out));
    out_dir.join("model.ckpt")
}

fn parse_top(cell: &str) -> Vec<(usize, f64)> {
    cell.split(' ')
        .map(|pair| {
            let (c, p) = pair.split_once(':').unwrap();
            (c.parse().unwrap(), p.parse().unwrap())
        })
        .collect()
}

#[test]
fn targets_with_zero_omega_match_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_small(dir.path());
    let args = with(&["targets", "--checkpoint", ckpt.to_str().unwrap(), "--omega", "0"], &SMALL[..4]);
    let out = bake_kit(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let rows: Vec<Vec<&str>> = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("row"))
        .map(|l| l.split('\t').collect())
        .collect();
    assert_eq!(rows.len(), 64);
    for r in &rows {
        assert_eq!(r[2], r[3]);
        let total: f64 = parse_top(r[2]).iter().map(|(_, p)| p).sum();
        assert!(total <= 1.0 + 1e-4);
    }
}

#[test]
fn targets_rows_sum_below_one() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_small(dir.path());
    let args = with(&["targets", "--checkpoint", ckpt.to_str().unwrap(), "--rows", "5"], &SMALL[..4]);
    let out = bake_kit(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let rows: Vec<String> = stdout(&out).lines().skip(2).map(String::from).collect();
    assert_eq!(rows.len(), 5);
    for row in rows {
        let cells: Vec<&str> = row.split('\t').collect();
        for cell in &cells[2..] {
            let top = parse_top(cell);
            assert_eq!(top.len(), 3);
            assert!(top.windows(2).all(|w| w[0].1 >= w[1].1));
            assert!(top.iter().map(|(_, p)| p).sum::<f64>() <= 1.0 + 1e-4);
        }
    }
}

#[test]
fn targets_reject_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_small(dir.path());
    let out = bake_kit(&["targets", "--checkpoint", ckpt.to_str().unwrap(), "--synth-dim", "9"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn near_duplicate_pair_share_their_predictions() {
    // rows 0 and 1 point the same way; the others are orthogonal to them
    let mut features = Tensor::zeros(&[6, 6]);
    features.row_mut(0).copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    features.row_mut(1).copy_from_slice(&[1.0, 0.01, 0.0, 0.0, 0.0, 0.0]);
    for r in 2..6 {
        features.set(r, r, 1.0);
    }
    let mut logits = Tensor::zeros(&[6, 10]);
    for (r, class) in [2, 5, 7, 8, 9, 0].into_iter().enumerate() {
        logits.set(r, class, 12.0);
    }
    let cfg = BakeConfig::default();
    let q = build_soft_targets(&features, &logits, None, &cfg).unwrap();
    let p = temperature_probs(&logits, cfg.tau).unwrap();
    let classes = |t: &Tensor, r: usize| top_k(t.row(r), 3).into_iter().map(|(c, _)| c).collect::<Vec<_>>();
    assert!(!classes(&p, 0).starts_with(&[2, 5]));
    assert_eq!(&classes(q.as_tensor(), 0)[..2], &[2, 5]);
    assert_eq!(&classes(q.as_tensor(), 1)[..2], &[5, 2]);
}

fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

#[test]
fn trains_on_idx_files() {
    let dir = tempfile::tempdir().unwrap();
    let n = 40u32;
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let pixels: Vec<u8> = (0..n * 4).map(|i| ((i / 4) % 10 * 20 + 30 + i % 4) as u8).collect();
    let write = |name: &str, bytes: Vec<u8>| {
        let path = dir.path().join(name);
        std::fs::write(&path, bytes).unwrap();
        path.to_str().unwrap().to_string()
    };
    let img = write("img", idx_bytes(0x803, &[n, 2, 2], &pixels));
    let lbl = write("lbl", idx_bytes(0x801, &[n], &labels));
    let out_dir = dir.path().join("run");
    let out = bake_kit(&[
        "train", "--dataset", "idx", "--train-images", &img, "--train-labels", &lbl, "--test-images", &img,
        "--test-labels", &lbl, "--n-hat", "8", "--epochs", "2", "--out-dir", out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["architecture"]["input_dim"], 4);
    assert_eq!(manifest["dataset"]["train_examples"], 40);
}
