//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use serde_json::json;

use stn_denoise::data::{
    add_gaussian_noise_with, frame_file_name, list_frames, noise_rng, read_frame, write_frame, SIGMA_SET,
};
use stn_denoise::metrics::FrameMetrics;
use stn_denoise::stn::SPATIAL_MULTIPLE;
use stn_denoise::train::denoise_sequence;
use stn_denoise::{load_checkpoint, psnr, ssim, train, LrSchedule, MetricsReport, TrainConfig};

use crate::cli::{parse_list, DenoiseArgs, EvaluateArgs, Overlay, SynthNoiseArgs, TrainArgs};

fn existing_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        bail!("{what} {} is not a directory", path.display());
    }
    Ok(())
}

fn existing_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => {
            bail!("directory {} for {} does not exist", p.display(), path.display())
        }
        _ => Ok(()),
    }
}

/// Creates `out` if needed. It must not be one of the input directories, and
/// must not already hold numbered frames past `count`, which would leave a
/// mixed clip behind.
fn prepare_output_dir(out: &Path, inputs: &[&Path], count: usize) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let canon = out.canonicalize().with_context(|| format!("resolving {}", out.display()))?;
    for input in inputs {
        if input.canonicalize().ok().as_ref() == Some(&canon) {
            bail!("output directory {} is also an input directory", out.display());
        }
    }
    let stale = out.join(frame_file_name(count));
    if stale.exists() {
        bail!("output directory {} already holds frames beyond {count} (found {})", out.display(), stale.display());
    }
    Ok(())
}

pub fn synth_noise(args: SynthNoiseArgs, cfg: &Overlay) -> Result<()> {
    let input: PathBuf = cfg.required(args.input_dir, "input-dir")?;
    let output: PathBuf = cfg.required(args.output_dir, "output-dir")?;
    let sigma: f64 = cfg.required(args.sigma, "sigma")?;
    let seed: u64 = cfg.pick(args.seed, "seed")?.unwrap_or(0);
    if !(sigma >= 0.0) || !sigma.is_finite() {
        bail!("--sigma must be a finite value >= 0, got {sigma}");
    }
    existing_dir(&input, "input directory")?;
    let frames = list_frames(&input)?;
    prepare_output_dir(&output, &[&input], frames.len())?;

    for (i, path) in frames.iter().enumerate() {
        let clean = read_frame(path)?;
        let noisy = add_gaussian_noise_with(&clean, sigma, &mut noise_rng(seed, i as u64))?;
        write_frame(&output.join(frame_file_name(i)), &noisy)?;
    }
    let manifest = json!({
        "input-dir": input.display().to_string(),
        "output-dir": output.display().to_string(),
        "sigma": sigma,
        "seed": seed,
    });
    let path = output.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} noisy frames (sigma {sigma}, seed {seed}) to {}", frames.len(), output.display());
    Ok(())
}

pub fn train_cmd(args: TrainArgs, cfg: &Overlay) -> Result<()> {
    let defaults = TrainConfig::default();
    let data_dir: PathBuf = cfg.required(args.data_dir, "data-dir")?;
    let checkpoint: PathBuf = cfg.required(args.checkpoint_out, "checkpoint-out")?;
    let loss_log = cfg.pick(args.loss_log, "loss-log")?.unwrap_or_else(|| checkpoint.with_extension("csv"));
    let sigma_set = match cfg.pick(args.sigmas, "sigmas")? {
        Some(s) => parse_list(&s)?,
        None => SIGMA_SET.to_vec(),
    };
    let config = TrainConfig {
        epochs: cfg.pick(args.epochs, "epochs")?.unwrap_or(defaults.epochs),
        lr: LrSchedule {
            initial: cfg.pick(args.lr, "lr")?.unwrap_or(defaults.lr.initial),
            decayed: cfg.pick(args.lr_decayed, "lr-decayed")?.unwrap_or(defaults.lr.decayed),
            decay_after_epoch: cfg.pick(args.decay_after_epoch, "decay-after-epoch")?.unwrap_or(defaults.lr.decay_after_epoch),
        },
        crop_size: cfg.pick(args.crop, "crop")?.unwrap_or(defaults.crop_size),
        sigma_set,
        seed: cfg.pick(args.seed, "seed")?.unwrap_or(defaults.seed),
        steps_per_epoch: cfg.pick(args.steps_per_epoch, "steps-per-epoch")?,
        dataset_root: data_dir.clone(),
        checkpoint_path: Some(checkpoint.clone()),
        loss_log_path: Some(loss_log.clone()),
    };
    config.validate()?;
    existing_dir(&data_dir, "data directory")?;
    existing_parent(&checkpoint)?;
    existing_parent(&loss_log)?;

    info!("training {} epochs on {}", config.epochs, data_dir.display());
    let (_, summary) = train(&config)?;
    let last = summary.epoch_mean_loss.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} steps over {} epochs, final epoch mean loss {last:.6e}; checkpoint {}, loss log {}",
        summary.steps.len(),
        config.epochs,
        checkpoint.display(),
        loss_log.display()
    );
    Ok(())
}

pub fn denoise(args: DenoiseArgs, cfg: &Overlay) -> Result<()> {
    let checkpoint: PathBuf = cfg.required(args.checkpoint, "checkpoint")?;
    let input: PathBuf = cfg.required(args.input_dir, "input-dir")?;
    let output: PathBuf = cfg.required(args.output_dir, "output-dir")?;
    existing_dir(&input, "input directory")?;
    let (model, _) = load_checkpoint::<f32>(&checkpoint)?.into_denoiser(&checkpoint)?;
    let paths = list_frames(&input)?;
    let frames = paths.iter().map(|p| read_frame(p)).collect::<stn_denoise::Result<Vec<_>>>()?;
    let (_, h, w) = frames[0].dims3("denoise")?;
    if h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
        bail!("frame size {h}×{w} must be divisible by {SPATIAL_MULTIPLE} in both dimensions");
    }
    if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.shape() != frames[0].shape()) {
        bail!("frame {} is {:?} but frame 0 is {:?}", paths[i].display(), f.shape(), frames[0].shape());
    }
    prepare_output_dir(&output, &[&input], frames.len())?;

    let denoised = denoise_sequence(&model, &frames)?;
    for (i, frame) in denoised.iter().enumerate() {
        write_frame(&output.join(frame_file_name(i)), frame)?;
    }
    println!("denoised {} frames into {}", denoised.len(), output.display());
    Ok(())
}

pub fn evaluate(args: EvaluateArgs, cfg: &Overlay) -> Result<()> {
    let clean_dir: PathBuf = cfg.required(args.clean_dir, "clean-dir")?;
    let test_dir: PathBuf = cfg.required(args.test_dir, "test-dir")?;
    let report: PathBuf = cfg.required(args.report, "report")?;
    let sigma: Option<f64> = cfg.pick(args.sigma, "sigma")?;
    existing_dir(&clean_dir, "clean directory")?;
    existing_dir(&test_dir, "test directory")?;
    existing_parent(&report)?;
    let clean = list_frames(&clean_dir)?;
    let test = list_frames(&test_dir)?;
    if clean.len() != test.len() {
        bail!(
            "frame count mismatch: {} has {} frames, {} has {}",
            clean_dir.display(),
            clean.len(),
            test_dir.display(),
            test.len()
        );
    }

    let mut rows = Vec::with_capacity(clean.len());
    for (i, (c, t)) in clean.iter().zip(&test).enumerate() {
        let (a, b) = (read_frame(c)?, read_frame(t)?);
        if a.shape() != b.shape() {
            bail!("frame {i}: {} is {:?} but {} is {:?}", c.display(), a.shape(), t.display(), b.shape());
        }
        rows.push(FrameMetrics { frame: frame_file_name(i), psnr_db: psnr(&a, &b)?, ssim: ssim(&a, &b)? });
    }
    let report_data = MetricsReport::new(rows, sigma);
    let (csv, json) = (report.with_extension("csv"), report.with_extension("json"));
    fs::write(&csv, report_data.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    fs::write(&json, report_data.to_json() + "\n").with_context(|| format!("writing {}", json.display()))?;
    println!(
        "{} frames: mean PSNR {} dB, mean SSIM {:.6}; reports {} and {}",
        report_data.frames.len(),
        stn_denoise::metrics::format_db(report_data.mean_psnr_db),
        report_data.mean_ssim,
        csv.display(),
        json.display()
    );
    Ok(())
}
