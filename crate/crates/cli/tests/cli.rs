use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "model.d_model=16",
    "--set",
    "model.n_heads=2",
    "--set",
    "model.d_ff=24",
    "--set",
    "model.n_enc_layers=1",
    "--set",
    "model.n_dec_layers=2",
    "--set",
    "train.steps=8",
    "--set",
    "train.eval_every=4",
    "--set",
    "train.max_tokens=128",
];

fn natmtl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_natmtl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = natmtl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, task: &str, repeats: &str) {
    ok(&[
        "gen-data",
        "--task",
        task,
        "--vocab-size",
        "12",
        "--n",
        "120",
        "--n-dev",
        "20",
        "--n-test",
        "20",
        "--len-min",
        "3",
        "--len-max",
        "6",
        "--source-repeats",
        repeats,
        "--seed",
        "3",
        "--out",
        p(dir),
    ]);
}

fn train(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec!["train", "--data", p(data), "--out", p(out)];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn show_config_lists_every_key() {
    let text = ok(&["show-config"]);
    for key in [
        "model.variant",
        "mtl.lambda",
        "mtl.share_params",
        "glancing.ratio_start",
        "optim.lr",
        "train.seed",
    ] {
        assert!(text.contains(&format!("{key} = ")), "{key} missing");
    }
    let over = ok(&["show-config", "--set", "mtl.lambda=0.25"]);
    assert!(over.contains("mtl.lambda = 0.25"));
}

#[test]
fn unknown_key_fails_listing_valid_keys() {
    let out = natmtl(&["show-config", "--set", "mtl.lamda=1"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("mtl.lamda") && err.contains("mtl.lambda"),
        "{err}"
    );
}

#[test]
fn missing_file_error_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let ghost = dir.path().join("nowhere.ckpt");
    let out = natmtl(&["decode", "--ckpt", p(&ghost), "--src", p(&ghost)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.ckpt"));
}

#[test]
fn train_decode_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    gen(&data, "copy", "1");
    train(&data, &run, &["--set", "model.variant=ctc"]);
    for f in [
        "final.ckpt",
        "averaged.ckpt",
        "best1.ckpt",
        "metrics.jsonl",
        "config.txt",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    assert_eq!(
        fs::read_to_string(run.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );

    let ckpt = run.join("final.ckpt");
    let src = data.join("test.src");
    let (h1, h2) = (dir.path().join("h1"), dir.path().join("h2"));
    ok(&[
        "decode",
        "--ckpt",
        p(&ckpt),
        "--src",
        p(&src),
        "--out",
        p(&h1),
    ]);
    ok(&[
        "decode",
        "--ckpt",
        p(&ckpt),
        "--src",
        p(&src),
        "--out",
        p(&h2),
    ]);
    assert_eq!(fs::read(&h1).unwrap(), fs::read(&h2).unwrap());
    assert_eq!(fs::read_to_string(&h1).unwrap().lines().count(), 20);
    let beam = ok(&[
        "decode",
        "--ckpt",
        p(&ckpt),
        "--src",
        p(&src),
        "--mode",
        "beam",
        "--beam-size",
        "4",
    ]);
    assert_eq!(beam.lines().count(), 20);

    let refs = data.join("test.tgt");
    let report = ok(&[
        "eval",
        "--hyp",
        p(&refs),
        "--ref",
        p(&refs),
        "--report",
        "bleu,repetition,length-buckets",
    ]);
    let lines: Vec<serde_json::Value> = report
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines[0]["metric"], "bleu");
    assert!((lines[0]["value"].as_f64().unwrap() - 100.0).abs() < 1e-9);
    assert_eq!(lines[1]["metric"], "repetition_rate");
    assert!(lines.len() >= 3);
}

#[test]
fn lambda_one_reproduces_baseline_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    gen(&data, "two_mode_reorder", "2");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&data, &a, &[]);
    train(
        &data,
        &b,
        &["--set", "mtl.enabled=true", "--set", "mtl.lambda=1"],
    );
    assert_eq!(
        fs::read(a.join("final.ckpt")).unwrap(),
        fs::read(b.join("final.ckpt")).unwrap()
    );
}

#[test]
fn teacher_distill_keeps_line_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let teacher = dir.path().join("teacher");
    let distilled = dir.path().join("distilled");
    gen(&data, "two_mode_reorder", "2");
    let mut args = vec!["train-teacher", "--data", p(&data), "--out", p(&teacher)];
    args.extend_from_slice(TINY);
    ok(&args);
    let ckpt = teacher.join("final.ckpt");
    ok(&[
        "distill",
        "--teacher",
        p(&ckpt),
        "--data",
        p(&data),
        "--beam",
        "2",
        "--out",
        p(&distilled),
    ]);
    let lines = |f: &Path| fs::read_to_string(f).unwrap().lines().count();
    assert_eq!(
        lines(&distilled.join("train.tgt")),
        lines(&data.join("train.tgt"))
    );
    assert_eq!(
        fs::read(distilled.join("train.src")).unwrap(),
        fs::read(data.join("train.src")).unwrap()
    );
    assert!(distilled.join("dev.tgt").exists());
}
