//! The `tcip` binary end to end on a 16³ grid.

use std::path::Path;
use std::process::{Command, Output};

fn tcip(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcip"))
        .args(args)
        .env("TCIP_OUTPUT_ROOT", root)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn synth_train_register_eval() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    ok(&tcip(r, &["synth", "--out", "data", "--pairs", "2", "--grid-size", "16", "--num-blobs", "5", "--seed", "7"]));
    assert!(r.join("data/manifest.json").exists());

    let common = ["--data-dir", r.join("data").to_str().unwrap(), "--patch-size", "5"].map(String::from);
    let mut train: Vec<String> = ["train", "--steps", "2", "--output-dir", "run"].map(String::from).to_vec();
    train.extend(common.iter().cloned());
    ok(&tcip(r, &train.iter().map(String::as_str).collect::<Vec<_>>()));
    let ckpt = r.join("run/checkpoint.tcip");
    assert!(ckpt.exists());
    assert!(r.join("run/loss_curve.json").exists());

    ok(&tcip(
        r,
        &[
            "register",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--fixed",
            r.join("data/pair_000/fixed").to_str().unwrap(),
            "--moving",
            r.join("data/pair_000/moving").to_str().unwrap(),
            "--moving-labels",
            r.join("data/pair_000/moving_labels").to_str().unwrap(),
            "--out",
            "reg",
        ],
    ));
    for f in ["field.json", "field.raw", "warped.raw", "warped_labels.raw", "trace.json"] {
        assert!(r.join("reg").join(f).exists(), "missing {f}");
    }
    let field = tcip::io::load_field(&r.join("reg/field")).unwrap();
    assert_eq!(field.dims(), [16; 3]);

    let mut eval: Vec<String> = ["eval", "--checkpoint", ckpt.to_str().unwrap(), "--output-dir", "eval"].map(String::from).to_vec();
    eval.extend(common.iter().cloned());
    let args: Vec<&str> = eval.iter().map(String::as_str).collect();
    ok(&tcip(r, &args));
    let first = std::fs::read(r.join("eval/report.json")).unwrap();
    assert!(r.join("eval/report.txt").exists());
    assert!(r.join("eval/timings.json").exists());
    ok(&tcip(r, &args));
    assert_eq!(std::fs::read(r.join("eval/report.json")).unwrap(), first);
}

#[test]
fn failures_exit_nonzero_with_a_diagnostic() {
    let root = tempfile::tempdir().unwrap();
    let out = tcip(
        root.path(),
        &["register", "--checkpoint", "absent.tcip", "--fixed", "f", "--moving", "m", "--out", "o"],
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error["), "{err}");
    assert!(err.contains("absent.tcip"), "{err}");

    let out = tcip(root.path(), &["train", "--window", "1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("window"));

    let out = tcip(root.path(), &["train", "--mode", "tci9"]);
    assert_eq!(out.status.code(), Some(2));
}
