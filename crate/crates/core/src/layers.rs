//! Parameterized layers and the forward-pass context they run in.

use std::collections::HashMap;

use rand::Rng;

use crate::error::Result;
use crate::kernels::ConvGeometry;
use crate::params::{ParamId, ParamStore, RunningStatsUpdate};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running buffers are updated afterwards.
    Train,
    /// Running statistics; read-only on the store.
    Eval,
}

/// One forward pass: a tape, the parameters it reads, and the batch-norm
/// statistics it produced.
pub struct Forward<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub store: &'a ParamStore<T>,
    pub mode: Mode,
    leaves: HashMap<ParamId, Var>,
    stats: Vec<RunningStatsUpdate>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, mode: Mode) -> Self {
        Forward { tape, store, mode, leaves: HashMap::new(), stats: Vec::new() }
    }

    /// Tape leaf for a parameter. Repeated uses within one pass share a leaf.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.leaves.get(&id) {
            return v;
        }
        let v = self.tape.param(self.store, id);
        self.leaves.insert(id, v);
        v
    }

    /// Batch-norm updates gathered during the pass, in execution order.
    pub fn into_stats(self) -> Vec<RunningStatsUpdate> {
        self.stats
    }
}

/// 3×3 convolution (padding 1) followed by batch norm and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub weight: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl ConvBnRelu {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let conv = Conv::new(store, name, c_in, c_out, 3, rng);
        ConvBnRelu {
            weight: conv.weight,
            bias: conv.bias,
            gamma: store.add(&format!("{name}.bn.gamma"), Tensor::ones(&[c_out])),
            beta: store.add(&format!("{name}.bn.beta"), Tensor::zeros(&[c_out])),
            running_mean: store.add_buffer(&format!("{name}.bn.running_mean"), Tensor::zeros(&[c_out])),
            running_var: store.add_buffer(&format!("{name}.bn.running_var"), Tensor::ones(&[c_out])),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (w, b, g, be) = (f.param(self.weight), f.param(self.bias), f.param(self.gamma), f.param(self.beta));
        let y = f.tape.conv2d(x, w, b, ConvGeometry { stride: 1, padding: 1 })?;
        let y = match f.mode {
            Mode::Train => {
                let (y, stats) = f.tape.batchnorm_train(y, g, be, BN_EPS)?;
                f.stats.push(RunningStatsUpdate { mean: self.running_mean, var: self.running_var, stats });
                y
            }
            Mode::Eval => {
                let (store, tape) = (f.store, &mut *f.tape);
                tape.batchnorm_eval(y, g, be, store.value(self.running_mean), store.value(self.running_var), BN_EPS)?
            }
        };
        Ok(f.tape.relu(y))
    }
}

/// Plain convolution with bias; no normalization or activation.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub padding: usize,
}

impl Conv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_xavier(&format!("{name}.weight"), &[c_out, c_in, k, k], c_in * k * k, c_out * k * k, rng);
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Conv { weight, bias, padding: k / 2 }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        f.tape.conv2d(x, w, b, ConvGeometry { stride: 1, padding: self.padding })
    }
}

/// 2× upsampling transposed convolution.
#[derive(Debug, Clone)]
pub struct Deconv {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Deconv {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_xavier(&format!("{name}.weight"), &[c_in, c_out, 2, 2], c_out * 4, c_in * 4, rng);
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[c_out]));
        Deconv { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        f.tape.deconv2d(x, w, b)
    }
}

/// Fully connected layer `M×N`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add_xavier(&format!("{name}.weight"), &[n_out, n_in], n_in, n_out, rng);
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[n_out]));
        Linear { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        f.tape.fully_connected(x, w, b)
    }
}
