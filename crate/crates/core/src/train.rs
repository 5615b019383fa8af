//! Training loop: one window per step, MSE against the clean mid frame, Adam.

use std::fmt::Write as _;
use std::path::PathBuf;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{save_checkpoint, write_atomic};
use crate::data::{make_window, noise_rng, window_indices, Crop, Dataset, FrameWindow, SIGMA_SET};
use crate::error::{Error, Result};
use crate::layers::{Forward, Mode, BN_MOMENTUM};
use crate::optim::AdamState;
use crate::pipeline::{pipeline_forward, Denoiser};
use crate::stn::SPATIAL_MULTIPLE;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BATCH_SIZE: usize = 1;
const SAMPLER_STREAM: u64 = 1 << 50;

/// Step learning rate: `initial` through epoch `decay_after_epoch`, then `decayed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub decayed: f64,
    pub decay_after_epoch: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { initial: 1e-3, decayed: 1e-4, decay_after_epoch: 50 }
    }
}

impl LrSchedule {
    /// Learning rate of a 1-based epoch.
    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch <= self.decay_after_epoch {
            self.initial
        } else {
            self.decayed
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: LrSchedule,
    pub crop_size: usize,
    pub sigma_set: Vec<f64>,
    pub seed: u64,
    /// Windows per epoch; `None` visits every frame of every clip once.
    pub steps_per_epoch: Option<usize>,
    pub dataset_root: PathBuf,
    pub checkpoint_path: Option<PathBuf>,
    pub loss_log_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr: LrSchedule::default(),
            crop_size: 64,
            sigma_set: SIGMA_SET.to_vec(),
            seed: 0,
            steps_per_epoch: None,
            dataset_root: PathBuf::from("data"),
            checkpoint_path: None,
            loss_log_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.crop_size == 0 || self.crop_size % SPATIAL_MULTIPLE != 0 {
            return Err(Error::InvalidArgument(format!(
                "crop size {} must be a positive multiple of {SPATIAL_MULTIPLE}",
                self.crop_size
            )));
        }
        if self.sigma_set.is_empty() || self.sigma_set.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidArgument("sigma set must be non-empty and non-negative".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::InvalidArgument("steps per epoch must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainSummary {
    pub steps: Vec<StepRecord>,
    pub epoch_mean_loss: Vec<f64>,
}

impl TrainSummary {
    /// `epoch,step,loss,lr,sigma` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,loss,lr,sigma\n");
        for r in &self.steps {
            writeln!(out, "{},{},{:e},{:e},{}", r.epoch, r.step, r.loss, r.lr, r.sigma).unwrap();
        }
        out
    }
}

/// Seeded stream of training windows: shuffled passes over every
/// `(clip, frame)` pair, each with a random σ, crop origin and noise seed.
pub struct WindowSampler<'a> {
    dataset: &'a Dataset,
    crop: usize,
    sigmas: Vec<f64>,
    rng: ChaCha8Rng,
    order: Vec<(usize, usize)>,
}

impl<'a> WindowSampler<'a> {
    pub fn new(dataset: &'a Dataset, crop: usize, sigmas: &[f64], seed: u64) -> Result<Self> {
        for clip in &dataset.clips {
            let (h, w) = clip.dims();
            if crop > h || crop > w {
                return Err(Error::InvalidArgument(format!(
                    "crop size {crop} exceeds clip {} frames of {h}×{w}",
                    clip.name
                )));
            }
        }
        Ok(WindowSampler { dataset, crop, sigmas: sigmas.to_vec(), rng: noise_rng(seed, SAMPLER_STREAM), order: Vec::new() })
    }

    pub fn next_window(&mut self) -> Result<FrameWindow> {
        if self.order.is_empty() {
            self.order = self
                .dataset
                .clips
                .iter()
                .enumerate()
                .flat_map(|(c, clip)| (0..clip.len()).map(move |t| (c, t)))
                .collect();
            self.order.shuffle(&mut self.rng);
            self.order.reverse();
        }
        let (c, t) = self.order.pop().expect("dataset has frames");
        let clip = &self.dataset.clips[c];
        let sigma = self.sigmas[self.rng.random_range(0..self.sigmas.len())];
        let (h, w) = clip.dims();
        let y = self.rng.random_range(0..=h - self.crop);
        let x = self.rng.random_range(0..=w - self.crop);
        let seed: u64 = self.rng.random();
        make_window(clip, t, sigma, Some(Crop { size: self.crop, y, x }), seed)
    }
}

/// One optimization step on one window; returns the loss.
pub fn train_step(model: &mut Denoiser<f32>, adam: &mut AdamState<f32>, window: &FrameWindow, lr: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let mut f = Forward::new(&mut tape, &model.store, Mode::Train);
    let frames: Vec<Var> = window.frames.iter().map(|t| f.tape.constant(t.clone())).collect();
    let out = pipeline_forward(&mut f, &frames, &model.params)?;
    let target = f.tape.constant(window.clean_mid.clone());
    let loss = f.tape.mse_loss(out, target)?;
    let stats = f.into_stats();
    let loss_value = tape.value(loss).data()[0] as f64;
    if !loss_value.is_finite() {
        return Err(Error::InvalidArgument(format!("training diverged: loss is {loss_value}")));
    }
    model.store.zero_grad();
    tape.backward(loss, Some(&mut model.store))?;
    model.store.apply_running_stats(&stats, BN_MOMENTUM);
    adam.step(&mut model.store, lr);
    Ok(loss_value)
}

/// Trains `model` on an in-memory dataset. Writes the checkpoint and loss
/// log after every epoch when the config names paths for them.
pub fn train_on(
    dataset: &Dataset,
    config: &TrainConfig,
    model: &mut Denoiser<f32>,
    adam: &mut AdamState<f32>,
) -> Result<TrainSummary> {
    config.validate()?;
    if dataset.num_windows() == 0 {
        return Err(Error::Dataset("dataset has no frames".into()));
    }
    let mut sampler = WindowSampler::new(dataset, config.crop_size, &config.sigma_set, config.seed)?;
    let steps_per_epoch = config.steps_per_epoch.unwrap_or(dataset.num_windows());
    let mut summary = TrainSummary::default();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let lr = config.lr.lr(epoch);
        let mut total = 0.0;
        for _ in 0..steps_per_epoch {
            let window = sampler.next_window()?;
            let loss = train_step(model, adam, &window, lr)?;
            total += loss;
            summary.steps.push(StepRecord { epoch, step, loss, lr, sigma: window.sigma });
            step += 1;
        }
        let mean = total / steps_per_epoch as f64;
        summary.epoch_mean_loss.push(mean);
        info!("epoch {epoch}/{}: mean loss {mean:.6e}, lr {lr:e}", config.epochs);
        if let Some(path) = &config.checkpoint_path {
            save_checkpoint(path, &model.store, Some(adam))?;
        }
        if let Some(path) = &config.loss_log_path {
            write_atomic(path, summary.to_csv().as_bytes())?;
        }
    }
    Ok(summary)
}

/// Loads `config.dataset_root` and trains a freshly initialized pipeline.
pub fn train(config: &TrainConfig) -> Result<(Denoiser<f32>, TrainSummary)> {
    config.validate()?;
    let dataset = Dataset::load(&config.dataset_root)?;
    let mut model = Denoiser::init(config.seed);
    let mut adam = AdamState::new(&model.store);
    let summary = train_on(&dataset, config, &mut model, &mut adam)?;
    Ok((model, summary))
}

/// Denoises every frame of a noisy sequence using reflected windows.
pub fn denoise_sequence(model: &Denoiser<f32>, frames: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
    if frames.is_empty() {
        return Err(Error::Dataset("no frames to denoise".into()));
    }
    (0..frames.len())
        .map(|t| {
            let window: Vec<Tensor<f32>> = window_indices(t, frames.len()).iter().map(|&i| frames[i].clone()).collect();
            model.denoise(&window)
        })
        .collect()
}
