mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stn_denoise::data::{frame_file_name, write_frame};
use stn_denoise::{save_checkpoint, Denoiser};

const BIN: &str = env!("CARGO_BIN_EXE_stn-denoise");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_clip(dir: &Path, frames: usize, size: usize) {
    fs::create_dir_all(dir).unwrap();
    for (i, f) in common::synthetic_clip(frames, size).frames.iter().enumerate() {
        write_frame(&dir.join(frame_file_name(i)), f).unwrap();
    }
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).map(|p| (p.clone(), fs::read(&p).unwrap())).collect()
}

fn pixels(path: &Path) -> Vec<u8> {
    image::open(path).unwrap().to_rgb8().into_raw()
}

fn stderr_line(out: &Output) -> String {
    let s = String::from_utf8_lossy(&out.stderr).trim().to_owned();
    assert_eq!(s.lines().count(), 1, "diagnostic should be one line: {s:?}");
    s
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = tmp.path().join("clean");
    write_clip(&clean, 5, 16);
    let before = snapshot(&clean);
    let noisy = tmp.path().join("noisy");
    let ckpt = tmp.path().join("model.stnc");
    let out = tmp.path().join("out");
    let report = tmp.path().join("report.csv");

    let o = run(&["synth-noise", "--input-dir", p(&clean), "--output-dir", p(&noisy), "--sigma", "25", "--seed", "3"]);
    assert!(o.status.success(), "{o:?}");
    let noisy_before = snapshot(&noisy);
    let o = run(&["train", "--data-dir", p(&clean), "--epochs", "1", "--crop", "16", "--seed", "1", "--checkpoint-out", p(&ckpt)]);
    assert!(o.status.success(), "{o:?}");
    assert!(ckpt.exists() && ckpt.with_extension("csv").exists());
    assert!(!tmp.path().join("model.stnc.tmp").exists());
    let o = run(&["denoise", "--checkpoint", p(&ckpt), "--input-dir", p(&noisy), "--output-dir", p(&out)]);
    assert!(o.status.success(), "{o:?}");
    let o = run(&["evaluate", "--clean-dir", p(&clean), "--test-dir", p(&out), "--report", p(&report), "--sigma", "25"]);
    assert!(o.status.success(), "{o:?}");

    let frames: Vec<_> = fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(frames.len(), 5);
    for i in 0..5 {
        assert_eq!(image::image_dimensions(out.join(frame_file_name(i))).unwrap(), (16, 16));
    }

    let csv = fs::read_to_string(&report).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("frame,psnr_db,ssim"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 5);
    for (i, row) in rows.iter().enumerate() {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[0], frame_file_name(i));
        assert!(cols[1].parse::<f64>().unwrap() > 0.0);
        assert!((-1.0..=1.0).contains(&cols[2].parse::<f64>().unwrap()));
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(report.with_extension("json")).unwrap()).unwrap();
    assert_eq!(json["frames"].as_array().unwrap().len(), 5);
    assert!(json["mean_psnr_db"].as_f64().is_some());
    assert!(json["mean_ssim"].as_f64().is_some());
    assert_eq!(json["sigma"], 25.0);

    assert_eq!(snapshot(&clean), before);
    assert_eq!(snapshot(&noisy), noisy_before);
}

#[test]
fn synth_noise_is_deterministic_and_records_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = tmp.path().join("clean");
    write_clip(&clean, 3, 16);
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    for dir in [&a, &b] {
        assert!(run(&["synth-noise", "--input-dir", p(&clean), "--output-dir", p(dir), "--sigma", "15", "--seed", "9"]).status.success());
    }
    assert!(run(&["synth-noise", "--input-dir", p(&clean), "--output-dir", p(&c), "--sigma", "15", "--seed", "10"]).status.success());
    for i in 0..3 {
        let name = frame_file_name(i);
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
        assert_ne!(pixels(&a.join(&name)), pixels(&c.join(&name)));
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    let obj = manifest.as_object().unwrap();
    assert_eq!(obj.len(), 4);
    assert_eq!(manifest["sigma"], 15.0);
    assert_eq!(manifest["seed"], 9);
    assert_eq!(manifest["input-dir"], p(&clean));
    assert_eq!(manifest["output-dir"], p(&a));
}

#[test]
fn zero_sigma_reproduces_input_pixels() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = tmp.path().join("clean");
    write_clip(&clean, 2, 12);
    let out = tmp.path().join("out");
    assert!(run(&["synth-noise", "--input-dir", p(&clean), "--output-dir", p(&out), "--sigma", "0"]).status.success());
    for i in 0..2 {
        let name = frame_file_name(i);
        assert_eq!(pixels(&clean.join(&name)), pixels(&out.join(&name)));
    }
}

#[test]
fn zero_residual_checkpoint_passes_frames_through() {
    let tmp = tempfile::tempdir().unwrap();
    let clip = tmp.path().join("clip");
    write_clip(&clip, 4, 16);
    let mut model = Denoiser::<f32>::init(2);
    model.zero_residual();
    let ckpt = tmp.path().join("zero.stnc");
    save_checkpoint(&ckpt, &model.store, None).unwrap();
    let (o1, o2) = (tmp.path().join("o1"), tmp.path().join("o2"));
    for out in [&o1, &o2] {
        let o = run(&["denoise", "--checkpoint", p(&ckpt), "--input-dir", p(&clip), "--output-dir", p(out)]);
        assert!(o.status.success(), "{o:?}");
    }
    for i in 0..4 {
        let name = frame_file_name(i);
        assert_eq!(pixels(&clip.join(&name)), pixels(&o1.join(&name)));
        assert_eq!(fs::read(o1.join(&name)).unwrap(), fs::read(o2.join(&name)).unwrap());
    }
}

#[test]
fn evaluate_identity_and_noisy_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = tmp.path().join("clean");
    write_clip(&clean, 3, 24);
    let report = tmp.path().join("self.csv");
    assert!(run(&["evaluate", "--clean-dir", p(&clean), "--test-dir", p(&clean), "--report", p(&report)]).status.success());
    for row in fs::read_to_string(&report).unwrap().lines().skip(1) {
        let cols: Vec<&str> = row.split(',').collect();
        assert_eq!(cols[1], "inf");
        assert_eq!(cols[2].parse::<f64>().unwrap(), 1.0);
    }

    let noisy = tmp.path().join("noisy");
    assert!(run(&["synth-noise", "--input-dir", p(&clean), "--output-dir", p(&noisy), "--sigma", "25", "--seed", "4"]).status.success());
    let report = tmp.path().join("noisy.json");
    assert!(run(&["evaluate", "--clean-dir", p(&clean), "--test-dir", p(&noisy), "--report", p(&report)]).status.success());
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();

    // Direct PSNR over the exported 8-bit files.
    let mut total = 0.0;
    for i in 0..3 {
        let name = frame_file_name(i);
        let (a, b) = (pixels(&clean.join(&name)), pixels(&noisy.join(&name)));
        let mse: f64 = a.iter().zip(&b).map(|(&x, &y)| ((x as f64 - y as f64) / 255.0).powi(2)).sum::<f64>() / a.len() as f64;
        total += 10.0 * (1.0 / mse).log10();
    }
    let direct = total / 3.0;
    let reported = json["mean_psnr_db"].as_f64().unwrap();
    assert!((reported - direct).abs() <= 0.5, "reported {reported} direct {direct}");
}

#[test]
fn mismatched_frame_counts_list_both() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    write_clip(&a, 3, 16);
    write_clip(&b, 2, 16);
    let o = run(&["evaluate", "--clean-dir", p(&a), "--test-dir", p(&b), "--report", p(&tmp.path().join("r.csv"))]);
    assert!(!o.status.success());
    let line = stderr_line(&o);
    assert!(line.contains("3 frames") && line.contains("has 2"), "{line}");
}

#[test]
fn bad_invocations_fail_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["train", "--bogus", "1"]);
    assert!(!o.status.success());
    assert!(stderr_line(&o).contains("--bogus"));

    let o = run(&["denoise", "--checkpoint", "/nonexistent/x.stnc", "--input-dir", p(tmp.path()), "--output-dir", p(&tmp.path().join("o"))]);
    assert!(!o.status.success());
    stderr_line(&o);

    let o = run(&["synth-noise", "--input-dir", p(tmp.path())]);
    assert!(!o.status.success());
    assert!(stderr_line(&o).contains("--output-dir"));

    let clip = tmp.path().join("clip");
    write_clip(&clip, 2, 16);
    let o = run(&["synth-noise", "--input-dir", p(&clip), "--output-dir", p(&clip), "--sigma", "5"]);
    assert!(!o.status.success());
    assert!(stderr_line(&o).contains("also an input"));
}

#[test]
fn config_file_overlay() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = tmp.path().join("clean");
    write_clip(&clean, 2, 16);
    let out = tmp.path().join("out");
    let cfg = tmp.path().join("noise.cfg");
    fs::write(&cfg, format!("# noise settings\ninput-dir = {}\noutput-dir={}\nsigma=20\nseed=5\n", p(&clean), p(&out))).unwrap();

    // Flags override the file.
    let o = run(&["synth-noise", "--config", p(&cfg), "--seed", "6"]);
    assert!(o.status.success(), "{o:?}");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["sigma"], 20.0);
    assert_eq!(manifest["seed"], 6);

    fs::write(&cfg, "epochs=3\n").unwrap();
    let o = run(&["synth-noise", "--config", p(&cfg)]);
    assert!(!o.status.success());
    assert!(stderr_line(&o).contains("unknown key 'epochs'"));
}
