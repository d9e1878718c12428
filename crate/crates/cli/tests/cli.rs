use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use sha2::{Digest, Sha256};

fn fhpe(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fhpe"))
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = fhpe(cwd, args);
    assert!(
        out.status.success(),
        "fhpe {args:?} failed with {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path);
            }
        }
    }
    files.sort();
    files
}

fn tree_hash(dir: &Path, skip: &[&str]) -> String {
    let mut h = Sha256::new();
    for path in files_under(dir) {
        let rel = path.strip_prefix(dir).unwrap();
        if skip.iter().any(|s| rel == Path::new(s)) {
            continue;
        }
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(&path).unwrap());
    }
    format!("{:x}", h.finalize())
}

#[test]
fn gen_markers_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-markers", "--n", "10", "--seed", "7", "--out", "a"]);
    ok(d, &["gen-markers", "--n", "10", "--seed", "7", "--out", "b"]);
    ok(d, &["gen-markers", "--n", "10", "--seed", "8", "--out", "c"]);
    assert_eq!(files_under(&d.join("a")).len(), 12);
    assert_eq!(tree_hash(&d.join("a"), &[]), tree_hash(&d.join("b"), &[]));
    assert_ne!(
        tree_hash(&d.join("a"), &["resolved_config.json"]),
        tree_hash(&d.join("c"), &["resolved_config.json"])
    );
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-markers", "--n", "6", "--seed", "3", "--size", "48", "--out", "first"]);
    ok(d, &["gen-markers", "--config", "first/resolved_config.json", "--out", "second"]);
    assert_eq!(tree_hash(&d.join("first"), &[]), tree_hash(&d.join("second"), &[]));
}

#[test]
fn warp_keeps_the_center_and_fills_the_corners() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let side = 101;
    let board = RgbImage::from_fn(side, side, |x, y| {
        if (x / 10 + y / 10) % 2 == 0 {
            Rgb([250, 20, 20])
        } else {
            Rgb([20, 20, 250])
        }
    });
    board.save(d.join("board.png")).unwrap();
    ok(d, &["warp", "board.png", "--out", "w"]);
    let warped = image::open(d.join("w/warped.png")).unwrap().to_rgb8();
    assert_eq!(warped.dimensions(), (side, side));
    assert_eq!(warped.get_pixel(50, 50), board.get_pixel(50, 50));
    assert_eq!(*warped.get_pixel(0, 0), Rgb([128, 128, 128]));
    assert_eq!(*warped.get_pixel(side - 1, side - 1), Rgb([128, 128, 128]));

    let refused = fhpe(d, &["warp", "board.png", "--output", "board.png"]);
    assert_eq!(refused.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(tmp.path(), &["gradcheck", "--out", "g"]);
    assert!(stdout.lines().any(|l| l.starts_with("PASS")), "{stdout}");
    assert!(tmp.path().join("g/gradcheck.json").is_file());
}

#[test]
fn missing_input_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for args in [
        &["train", "--dataset", "nope.jsonl", "--out", "t"][..],
        &["synth", "--source", "nope.jsonl", "--out", "s"],
        &["eval", "--checkpoint", "nope.bin"],
        &["warp", "nope.png"],
    ] {
        let out = fhpe(d, args);
        assert_eq!(out.status.code(), Some(3), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn malformed_input_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("bad.jsonl"), "{\"image_path\": \"x.png\"}\nnot json\n").unwrap();
    let out = fhpe(d, &["synth", "--source", "bad.jsonl", "--out", "s"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    fs::write(d.join("cfg.json"), "{\"n\": \"many\"}").unwrap();
    let out = fhpe(d, &["gen-markers", "--config", "cfg.json"]);
    assert_eq!(out.status.code(), Some(4));

    fs::write(d.join("ckpt.bin"), b"garbage").unwrap();
    fs::write(d.join("m.jsonl"), "").unwrap();
    let out = fhpe(d, &["eval", "--checkpoint", "ckpt.bin", "--manifest", "m.jsonl"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn zero_config_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-markers", "--n", "20"]);
    assert!(d.join("markers/manifest.jsonl").is_file());
    ok(d, &["synth"]);
    for f in ["manifest.jsonl", "train.jsonl", "test.jsonl", "resolved_config.json"] {
        assert!(d.join("fisheye").join(f).is_file(), "{f}");
    }
    ok(d, &["train", "--epochs", "1", "--input-size", "64", "--batch-size", "4"]);
    let log = fs::read_to_string(d.join("runs/train/log.jsonl")).unwrap();
    assert!(log.lines().any(|l| l.contains("\"split\":\"train\"")), "{log}");
    assert!(log.lines().any(|l| l.contains("\"split\":\"eval\"")), "{log}");
    assert!(d.join("runs/train/checkpoint.bin").is_file());

    let stdout = ok(d, &["eval"]);
    assert!(stdout.contains("MAE"));
    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("runs/eval/metrics.json")).unwrap()).unwrap();
    assert!(metrics["mae"].as_f64().unwrap().is_finite());
    assert!(d.join("runs/eval/radial_curve.svg").is_file());

    let table = ok(
        d,
        &[
            "ablate",
            "--epochs",
            "1",
            "--input-size",
            "64",
            "--seeds",
            "0",
            "--variants",
            "baseline,full",
        ],
    );
    assert!(table.contains("+module +rho +theta"), "{table}");
    let csv = fs::read_to_string(d.join("runs/ablate/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(d.join("runs/ablate/radial/m1r1t1.svg").is_file());
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(fhpe(d, &["gen-markers", "--n", "0"]).status.code(), Some(2));
    assert_eq!(fhpe(d, &["frobnicate"]).status.code(), Some(2));
    fs::write(d.join("x.jsonl"), "").unwrap();
    assert_eq!(
        fhpe(d, &["ablate", "--dataset", "x.jsonl", "--variants", "m9"]).status.code(),
        Some(2)
    );
}

#[test]
fn shipped_toy_config_loads() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy_ablation.json");
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(cfg["train"]["model"]["backbone"]["input_size"], 64);
    assert_eq!(cfg["variants"].as_array().unwrap().len(), 2);

    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-markers", "--n", "12"]);
    ok(d, &["synth"]);
    let cfg_arg = path.to_string_lossy().into_owned();
    ok(d, &["ablate", "--config", &cfg_arg, "--epochs", "1", "--seeds", "0", "--out", "toy"]);
    let resolved = fs::read_to_string(d.join("toy/resolved_config.json")).unwrap();
    assert!(resolved.contains("\"input_size\": 64"), "{resolved}");
}
