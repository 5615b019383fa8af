//! Two-stage cascade: five noisy frames in, the denoised middle frame out.
//!
//! Stage 1 runs one shared network over the sliding triples `(f0,f1,f2)`,
//! `(f1,f2,f3)`, `(f2,f3,f4)`. Stage 2 fuses the three results with its own
//! network, and the output is added back onto the noisy middle frame.
//!
//! The second stage's output layer starts at zero, so a fresh pipeline is the
//! identity on the noisy middle frame. With a random output layer the initial
//! residual is several times larger than the noise, and the optimizer settles
//! on a zero residual before it learns to denoise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{Forward, Mode};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::stn::{stn_forward, StnParams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const WINDOW_LEN: usize = 5;
pub const MID_INDEX: usize = 2;

#[derive(Debug, Clone)]
pub struct PipelineParams {
    /// Shared by all three first-stage invocations.
    pub stage1: StnParams,
    pub stage2: StnParams,
}

impl PipelineParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Self {
        let stage1 = StnParams::new(store, "stage1", rng);
        let stage2 = StnParams::new(store, "stage2", rng);
        stage2.zero_output(store);
        PipelineParams { stage1, stage2 }
    }
}

fn check_window<T: Scalar>(shapes: &[&[usize]]) -> Result<()> {
    if shapes.len() != WINDOW_LEN {
        return Err(Error::InvalidArgument(format!(
            "pipeline takes {WINDOW_LEN} frames, got {}",
            shapes.len()
        )));
    }
    if let Some(bad) = shapes.iter().find(|s| *s != &shapes[0]) {
        return Err(Error::shape("pipeline_forward", format!("frame {bad:?} does not match {:?}", shapes[0])));
    }
    Ok(())
}

/// Records the whole cascade on `f`'s tape and returns the denoised mid frame.
pub fn pipeline_forward<T: Scalar>(f: &mut Forward<'_, T>, frames: &[Var], params: &PipelineParams) -> Result<Var> {
    let shapes: Vec<&[usize]> = frames.iter().map(|&v| f.tape.value(v).shape()).collect();
    check_window::<T>(&shapes)?;
    let mut firsts = Vec::with_capacity(3);
    for start in 0..3 {
        firsts.push(stn_forward(f, &frames[start..start + 3], &params.stage1)?);
    }
    let residual = stn_forward(f, &firsts, &params.stage2)?;
    f.tape.add(frames[MID_INDEX], residual)
}

/// A parameter store holding a full pipeline.
#[derive(Debug, Clone)]
pub struct Denoiser<T> {
    pub store: ParamStore<T>,
    pub params: PipelineParams,
}

impl<T: Scalar> Denoiser<T> {
    /// Xavier-initialized pipeline; identical seeds give identical parameters.
    pub fn init(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let params = PipelineParams::new(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        Denoiser { store, params }
    }

    pub fn cast<U: Scalar>(&self) -> Denoiser<U> {
        Denoiser { store: self.store.cast(), params: self.params.clone() }
    }

    /// Zeroes the output layer of both stages; the pipeline then returns its
    /// noisy mid frame unchanged.
    pub fn zero_residual(&mut self) {
        self.params.stage1.zero_output(&mut self.store);
        self.params.stage2.zero_output(&mut self.store);
    }

    /// Inference-mode denoising of one window. Each network invocation gets its
    /// own tape so peak memory stays at one network's activations.
    pub fn denoise(&self, frames: &[Tensor<T>]) -> Result<Tensor<T>> {
        let shapes: Vec<&[usize]> = frames.iter().map(|t| t.shape()).collect();
        check_window::<T>(&shapes)?;
        let run = |inputs: [&Tensor<T>; 3], params: &StnParams| -> Result<Tensor<T>> {
            let mut tape = Tape::new();
            let mut f = Forward::new(&mut tape, &self.store, Mode::Eval);
            let vars: Vec<Var> = inputs.iter().map(|t| f.tape.constant((*t).clone())).collect();
            let out = stn_forward(&mut f, &vars, params)?;
            Ok(tape.value(out).clone())
        };
        let mut firsts = Vec::with_capacity(3);
        for start in 0..3 {
            firsts.push(run([&frames[start], &frames[start + 1], &frames[start + 2]], &self.params.stage1)?);
        }
        let residual = run([&firsts[0], &firsts[1], &firsts[2]], &self.params.stage2)?;
        crate::kernels::add(&frames[MID_INDEX], &residual)
    }
}
