use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn effipose(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_effipose"))
        .args(args)
        .env("EFFIPOSE_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic images plus a small RT config.
fn toy(dir: &Path, count: usize) -> (String, String) {
    let data = dir.join("data");
    let o = effipose(&[
        "synth",
        "--out",
        path(&data),
        "--count",
        &count.to_string(),
        "--res",
        "64",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = dir.join("toy.cfg");
    fs::write(
        &cfg,
        "name=toy\nhigh_res=64\nbatch_size=4\nepochs=1\naugment=false\n",
    )
    .unwrap();
    (
        path(&data.join("annotations.txt")).to_string(),
        path(&cfg).to_string(),
    )
}

#[test]
fn summarize_reports_totals() {
    let o = effipose(&["summarize", "--variant", "II"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let total = text.lines().last().unwrap();
    assert!(total.contains("(1.723M"), "{total}");
    assert!(total.contains("mac=2"), "{total}");
}

#[test]
fn summarize_reflects_no_upscaling() {
    let with = stdout(&effipose(&["summarize", "--variant", "RT"]));
    let without = stdout(&effipose(&[
        "summarize",
        "--variant",
        "RT",
        "--no-upscaling",
    ]));
    assert!(with.contains("upscale.t1"));
    assert!(!without.contains("upscale."));
}

#[test]
fn bad_variant_exits_2() {
    let o = effipose(&["summarize", "--variant", "V"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("'V'"));
}

#[test]
fn unknown_flag_rejected() {
    let o = effipose(&["summarize", "--variant", "RT", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn check_scaling_rows() {
    let o = effipose(&["check-scaling"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let phi1 = text
        .lines()
        .find(|l| l.trim_start().starts_with("1 "))
        .unwrap();
    assert!(phi1.contains("1.9203") && phi1.contains("2.0000"), "{phi1}");
    let depth = |v: &str| -> String {
        let line = text
            .lines()
            .find(|l| l.split_whitespace().next() == Some(v))
            .unwrap();
        line.split_whitespace().last().unwrap().to_string()
    };
    for (v, d) in [
        ("RT", "1"),
        ("I", "1"),
        ("II", "2"),
        ("III", "3"),
        ("IV", "4"),
    ] {
        assert_eq!(depth(v), d, "{v}");
    }
}

#[test]
fn train_one_epoch_writes_one_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (ann, cfg) = toy(dir.path(), 4);
    let out = dir.path().join("run");
    let o = effipose(&[
        "train",
        "--config",
        &cfg,
        "--data",
        &ann,
        "--out",
        path(&out),
        "--seed",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cks: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("epoch_"))
        .collect();
    assert_eq!(cks.len(), 1);
    let ck = out.join("epoch_0000");
    for f in ["weights.epw", "optimizer.epw", "config.txt"] {
        assert!(ck.join(f).is_file(), "{f}");
    }
    let resolved = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(resolved.contains("seed=3"));
    let log = fs::read_to_string(out.join("metrics.tsv")).unwrap();
    let lines: Vec<_> = log.lines().collect();
    assert_eq!(lines[0], "step\tepoch\tlr\tsigma\tloss");
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[1].split('\t').count(), 5);
}

#[test]
fn resume_continues_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (ann, cfg) = toy(dir.path(), 4);
    let out = dir.path().join("run");
    let o = effipose(&[
        "train",
        "--config",
        &cfg,
        "--data",
        &ann,
        "--out",
        path(&out),
    ]);
    assert!(o.status.success());
    let ck = out.join("epoch_0000");
    let o = effipose(&[
        "train",
        "--data",
        &ann,
        "--out",
        path(&out),
        "--resume",
        path(&ck),
        "--epochs",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("epoch_0001/weights.epw").is_file());
    let log = fs::read_to_string(out.join("metrics.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn missing_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = effipose(&[
        "train",
        "--variant",
        "RT",
        "--data",
        path(&dir.path().join("nope.txt")),
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let (ann, cfg) = toy(dir.path(), 4);
    let out = dir.path().join("run");
    let o = effipose(&[
        "train",
        "--config",
        &cfg,
        "--data",
        &ann,
        "--out",
        path(&out),
        "--lr-max",
        "1e12",
        "--epochs",
        "6",
    ]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let (ann, _) = toy(dir.path(), 3);
    let out = dir.path().join("eval");
    let o = effipose(&[
        "eval",
        "--data",
        &ann,
        "--predictions",
        &ann,
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(out.join("eval_metrics.txt")).unwrap();
    assert!(
        metrics.lines().any(|l| l == "pckh50.mean=100.0"),
        "{metrics}"
    );
    assert!(stdout(&o).contains("PCKh@50"));
}

#[test]
fn predict_emits_sixteen_keypoints() {
    let dir = tempfile::tempdir().unwrap();
    let (ann, cfg) = toy(dir.path(), 2);
    let w = dir.path().join("init");
    let o = effipose(&[
        "init-weights",
        "--config",
        &cfg,
        "--out",
        path(&w),
        "--seed",
        "1",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("pred");
    let weights = w.join("weights.epw");
    let o = effipose(&[
        "predict",
        "--config",
        &cfg,
        "--weights",
        path(&weights),
        "--data",
        &ann,
        "--scales",
        "1.0",
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("predictions.txt")).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    for l in lines {
        assert_eq!(l.split(',').count(), 1 + 3 * 16);
    }
    let image = dir.path().join("data/synthetic_0000.png");
    let o = effipose(&[
        "predict",
        "--config",
        &cfg,
        "--weights",
        path(&weights),
        "--image",
        path(&image),
        "--flip",
        "--out",
        path(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
