use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

use iff_cli::checkpoint::Checkpoint;
use iff_core::toydet::{DetectorModel, ModelArch};

fn iffdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iffdet")).args(args).output().unwrap()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("iffdet-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn s(p: &std::path::Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(iffdet(&[]).status.code(), Some(2));
    assert_eq!(iffdet(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(iffdet(&["gen", "--count", "0", "--out", "/dev/null"]).status.code(), Some(2));
    assert_eq!(iffdet(&["verify", "--suite", "nope"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = scratch("runtime");
    let missing = dir.join("missing.txt");
    let ckpt = dir.join("m.ckpt");
    let out = iffdet(&["train", "--data", s(&missing), "--out", s(&ckpt)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());

    let data = dir.join("d.txt");
    assert!(iffdet(&["gen", "--count", "3", "--out", s(&data)]).status.success());
    fs::write(&ckpt, b"garbage").unwrap();
    assert_eq!(iffdet(&["infer", "--ckpt", s(&ckpt), "--data", s(&data)]).status.code(), Some(1));
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn gen_is_deterministic_with_one_line_per_scene() {
    let dir = scratch("gen");
    let (a, b, c) = (dir.join("a.txt"), dir.join("b.txt"), dir.join("c.txt"));
    for p in [&a, &b] {
        assert!(iffdet(&["gen", "--count", "25", "--seed", "4", "--out", s(p)]).status.success());
    }
    assert!(iffdet(&["gen", "--count", "25", "--seed", "5", "--out", s(&c)]).status.success());
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 25);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = scratch("init");
    let (data, ckpt) = (dir.join("d.txt"), dir.join("m.ckpt"));
    assert!(iffdet(&["gen", "--count", "4", "--out", s(&data)]).status.success());
    let out = iffdet(&["train", "--data", s(&data), "--mi", "2", "--seed", "17", "--epochs", "0", "--out", s(&ckpt)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let loaded = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(loaded.config.iterations, 2);
    assert_eq!(loaded.epochs, 0);
    assert_eq!(&loaded.params, DetectorModel::new(17, ModelArch::default()).unwrap().params());
    let curve = fs::read_to_string(dir.join("m.ckpt.loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 2);
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn open_loop_heatmaps_match_and_infer_writes_csv() {
    let dir = scratch("analyze");
    let (data, ckpt, out) = (dir.join("d.txt"), dir.join("m.ckpt"), dir.join("out"));
    assert!(iffdet(&["gen", "--count", "12", "--seed", "2", "--out", s(&data)]).status.success());
    let t = iffdet(&["train", "--data", s(&data), "--mi", "0", "--epochs", "1", "--out", s(&ckpt)]);
    assert!(t.status.success());
    let a = iffdet(&["analyze", "--ckpt", s(&ckpt), "--data", s(&data), "--out-dir", s(&out), "--heatmaps", "2"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    for i in 0..2 {
        let with = fs::read(out.join(format!("heatmap_{i:03}_with.pgm"))).unwrap();
        let without = fs::read(out.join(format!("heatmap_{i:03}_without.pgm"))).unwrap();
        assert!(with.starts_with(b"P5"));
        assert_eq!(with, without);
    }
    for f in ["energy_with.csv", "energy_without.csv", "stability.csv", "summary.txt", "timing.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let csv = dir.join("dets.csv");
    let inf = iffdet(&["infer", "--ckpt", s(&ckpt), "--data", s(&data), "--score-thresh", "0.05", "--out", s(&csv)]);
    assert!(inf.status.success());
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("image,class,score,x,y,w,h\n"));
    assert!(String::from_utf8_lossy(&inf.stdout).contains("mAP@0.5="));
    let _ = fs::remove_dir_all(&dir);
}

#[test]
fn verify_reports_pass() {
    let out = iffdet(&["verify", "--suite", "parseval", "--trials", "20"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}
