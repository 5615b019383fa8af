//! Test-only oracles: central finite differences evaluated in `f64`, and
//! synthetic clips.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stn_denoise::data::Clip;
use stn_denoise::{pipeline_forward, stn_forward, ConvGeometry, Denoiser, Forward, Mode, ParamStore, Scalar, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-3;
pub const FD_REL_TOL: f64 = 1e-2;
/// Gradients whose norm is below this are compared absolutely: a bias that
/// feeds batch norm has an exactly zero gradient, and the ratio of two
/// round-off residues is noise.
pub const GRAD_NORM_FLOOR: f64 = 1e-6;

/// A scalar-valued computation over leaf inputs, buildable at any precision.
pub trait GradFn {
    fn build<T: Scalar>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Var;
}

#[macro_export]
macro_rules! grad_fn {
    ($name:ident, |$tape:ident, $v:ident| $body:expr) => {
        struct $name;
        impl crate::common::GradFn for $name {
            fn build<T: stn_denoise::Scalar>(
                &self,
                $tape: &mut stn_denoise::Tape<T>,
                $v: &[stn_denoise::Var],
            ) -> stn_denoise::Var {
                $body
            }
        }
    };
}

fn eval_f64<G: GradFn>(g: &G, inputs: &[Tensor<f64>], direction: &Tensor<f64>) -> f64 {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = g.build(&mut tape, &vars);
    tape.value(out).dot_f64(direction)
}

pub struct GradReport {
    /// `‖analytic − fd‖ / max(‖analytic‖, ‖fd‖, floor)` per input.
    pub rel_err: Vec<f64>,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.rel_err.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares the analytic gradient of `⟨g(x), r⟩` (random `r`), computed by
/// the tape at precision `T`, against central differences of the `f64`
/// evaluation.
pub fn check<T: Scalar, G: GradFn>(g: &G, inputs: &[Tensor<f64>], seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
        let out = g.build(&mut tape, &vars);
        tape.value(out).shape().to_vec()
    };
    let direction = Tensor::<f64>::from_fn(&probe, |_| rng.random_range(-1.0..1.0));

    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.cast())).collect();
    let out = g.build(&mut tape, &vars);
    let loss = tape.project(out, direction.cast()).unwrap();
    let grads = tape.backward(loss, None).unwrap();

    let mut rel_err = Vec::new();
    for (k, v) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match grads.get(*v) {
            Some(t) => t.data().iter().map(|x| x.f64()).collect(),
            None => vec![0.0; inputs[k].len()],
        };
        let mut fd = vec![0.0; inputs[k].len()];
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            fd[i] = (eval_f64(g, &plus, &direction) - eval_f64(g, &minus, &direction)) / (2.0 * FD_STEP);
        }
        let diff: f64 = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nf = fd.iter().map(|a| a * a).sum::<f64>().sqrt();
        rel_err.push(diff / na.max(nf).max(GRAD_NORM_FLOOR));
    }
    GradReport { rel_err }
}

grad_fn!(ConvOp, |t, v| t.conv2d(v[0], v[1], v[2], ConvGeometry::default()).unwrap());
grad_fn!(DeconvOp, |t, v| t.deconv2d(v[0], v[1], v[2]).unwrap());
grad_fn!(PoolOp, |t, v| t.maxpool2d(v[0], 2, 2).unwrap());
grad_fn!(BatchNormOp, |t, v| t.batchnorm_train(v[0], v[1], v[2], 1e-5).unwrap().0);
grad_fn!(FcOp, |t, v| t.fully_connected(v[0], v[1], v[2]).unwrap());
grad_fn!(ReluOp, |t, v| t.relu(v[0]));
grad_fn!(SigmoidOp, |t, v| t.sigmoid(v[0]));
grad_fn!(MeanPoolOp, |t, v| t.global_mean_pool(v[0]).unwrap());
grad_fn!(ScaleOp, |t, v| t.channel_scale(v[0], v[1]).unwrap());
grad_fn!(AddOp, |t, v| t.add(v[0], v[1]).unwrap());
grad_fn!(MseOp, |t, v| t.mse_loss(v[0], v[1]).unwrap());

/// The differentiable primitives of the architecture.
pub const PRIMITIVES: [&str; 11] = [
    "conv2d",
    "deconv2d",
    "maxpool2d",
    "batchnorm",
    "fully_connected",
    "relu",
    "sigmoid",
    "global_mean_pool",
    "channel_scale",
    "add",
    "mse_loss",
];

/// Worst relative gradient error of one random instance of a primitive,
/// with the analytic side computed in `f32`. Dimensions stay at most 6.
pub fn primitive_rel_err(name: &str, seed: u64) -> f64 {
    let r = &mut ChaCha8Rng::seed_from_u64(seed);
    let u = |shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng| random_tensor(shape, lo, hi, r);
    let report = match name {
        "conv2d" => check::<f32, _>(&ConvOp, &[u(&[3, 6, 5], -1.0, 1.0, r), u(&[4, 3, 3, 3], -0.5, 0.5, r), u(&[4], -0.5, 0.5, r)], seed),
        "deconv2d" => check::<f32, _>(&DeconvOp, &[u(&[4, 3, 5], -1.0, 1.0, r), u(&[4, 3, 2, 2], -0.5, 0.5, r), u(&[3], -0.5, 0.5, r)], seed),
        "maxpool2d" => check::<f32, _>(&PoolOp, &[random_distinct(&[3, 6, 6], r)], seed),
        "batchnorm" => check::<f32, _>(&BatchNormOp, &[u(&[3, 5, 4], -1.0, 1.0, r), u(&[3], 0.5, 1.5, r), u(&[3], -0.5, 0.5, r)], seed),
        "fully_connected" => check::<f32, _>(&FcOp, &[u(&[6], -1.0, 1.0, r), u(&[4, 6], -1.0, 1.0, r), u(&[4], -1.0, 1.0, r)], seed),
        "relu" => check::<f32, _>(&ReluOp, &[random_away_from_zero(&[2, 4, 4], r)], seed),
        "sigmoid" => check::<f32, _>(&SigmoidOp, &[u(&[6], -4.0, 4.0, r)], seed),
        "global_mean_pool" => check::<f32, _>(&MeanPoolOp, &[u(&[4, 3, 5], -1.0, 1.0, r)], seed),
        "channel_scale" => check::<f32, _>(&ScaleOp, &[u(&[3, 4, 4], -1.0, 1.0, r), u(&[3], 0.0, 1.0, r)], seed),
        "add" => check::<f32, _>(&AddOp, &[u(&[2, 3, 3], -1.0, 1.0, r), u(&[2, 3, 3], -1.0, 1.0, r)], seed),
        "mse_loss" => check::<f32, _>(&MseOp, &[u(&[3, 4, 4], 0.0, 1.0, r), u(&[3, 4, 4], 0.0, 1.0, r)], seed),
        other => panic!("unknown primitive {other}"),
    };
    report.worst()
}

/// Trainable parameters of one network by hand: conv `C_out·C_in·9 + C_out`,
/// batch norm `2C`, fully connected `out·in + out`, transposed conv
/// `C_in·C_out·4 + C_out`.
pub fn hand_count_stn() -> usize {
    let conv = |i: usize, o: usize| o * i * 9 + o;
    let bn = |c: usize| 2 * c;
    let block = |i: usize, o: usize| conv(i, o) + bn(o);
    let pair = |i: usize, o: usize| block(i, o) + block(o, o);
    let deconv = |i: usize, o: usize| i * o * 4 + o;
    let fc = |i: usize, o: usize| o * i + o;
    let attn = |c: usize| fc(c, c / 2) + fc(c / 2, c);
    pair(9, 64)
        + pair(64, 128)
        + pair(128, 256)
        + deconv(256, 128)
        + pair(128, 128)
        + deconv(128, 64)
        + pair(64, 64)
        + conv(64, 3)
        + attn(128)
        + attn(64)
}

/// Finite-difference step for whole-pipeline checks. Central differences at
/// 1e-3 straddle ReLU and max-pool kinks of the deep network (batch norm over
/// a 2×2 bottleneck amplifies small weight changes), so the secant and the
/// tangent differ by several percent; at 1e-6 they agree while f64 round-off
/// stays near 1e-10.
pub const PIPELINE_FD_STEP: f64 = 1e-6;

pub struct PipelineCase {
    pub model: Denoiser<f64>,
    pub window: Vec<Tensor<f64>>,
    pub clean: Tensor<f64>,
}

pub fn random_frames(n: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_tensor(&[3, h, w], 0.0, 1.0, &mut rng)).collect()
}

/// An 8×8 pipeline case. A fresh pipeline starts with a zero second-stage
/// output layer, which would block every first-stage gradient, so that layer
/// gets random weights.
pub fn pipeline_case() -> PipelineCase {
    let mut model = Denoiser::<f64>::init(11);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for id in [model.params.stage2.out_conv.weight, model.params.stage2.out_conv.bias] {
        let shape = model.store.value(id).shape().to_vec();
        *model.store.value_mut(id) = random_tensor(&shape, -0.1, 0.1, &mut rng);
    }
    PipelineCase { model, window: random_frames(5, 8, 8, 12), clean: random_frames(1, 8, 8, 13).remove(0) }
}

/// Training-mode loss of the pipeline under `store`. With `live = Some(k)`
/// only first-stage invocation `k` is recorded against the parameters and
/// the other two enter as constants. With `backward`, gradients are added
/// into `store`.
pub fn pipeline_loss(case: &PipelineCase, store: &mut ParamStore<f64>, live: Option<usize>, backward: bool) -> f64 {
    let mut tape = Tape::new();
    let frozen = store.clone();
    let loss = {
        let mut f = Forward::new(&mut tape, &frozen, Mode::Train);
        let vars: Vec<Var> = case.window.iter().map(|t| f.tape.constant(t.clone())).collect();
        let out = match live {
            None => pipeline_forward(&mut f, &vars, &case.model.params).unwrap(),
            Some(k) => {
                let mut firsts = Vec::new();
                for start in 0..3 {
                    let y = stn_forward(&mut f, &vars[start..start + 3], &case.model.params.stage1).unwrap();
                    firsts.push(if start == k { y } else { f.tape.constant(f.tape.value(y).clone()) });
                }
                let residual = stn_forward(&mut f, &firsts, &case.model.params.stage2).unwrap();
                f.tape.add(vars[2], residual).unwrap()
            }
        };
        let target = f.tape.constant(case.clean.clone());
        f.tape.mse_loss(out, target).unwrap()
    };
    if backward {
        tape.backward(loss, Some(store)).unwrap();
    }
    tape.value(loss).data()[0]
}

pub fn grad_of(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.grad(store.id(name).unwrap()).unwrap().data().to_vec()
}

pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(GRAD_NORM_FLOOR)
}

/// Relative error between the analytic gradient of a shared first-stage
/// parameter and central differences over the listed elements.
pub fn shared_parameter_rel_err(name: &str, elements: &[usize]) -> f64 {
    let case = pipeline_case();
    let mut store = case.model.store.clone();
    store.zero_grad();
    pipeline_loss(&case, &mut store, None, true);
    let grad = grad_of(&store, name);
    let analytic: Vec<f64> = elements.iter().map(|&i| grad[i]).collect();

    let id = store.id(name).unwrap();
    let fd: Vec<f64> = elements
        .iter()
        .map(|&i| {
            let mut plus = case.model.store.clone();
            plus.value_mut(id).data_mut()[i] += PIPELINE_FD_STEP;
            let mut minus = case.model.store.clone();
            minus.value_mut(id).data_mut()[i] -= PIPELINE_FD_STEP;
            let lp = pipeline_loss(&case, &mut plus, None, false);
            let lm = pipeline_loss(&case, &mut minus, None, false);
            (lp - lm) / (2.0 * PIPELINE_FD_STEP)
        })
        .collect();
    vec_rel_err(&analytic, &fd)
}

/// Uniform values in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Random values bounded away from zero, so ReLU kinks sit outside the
/// finite-difference stencil.
pub fn random_away_from_zero(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced well beyond the finite-difference step, in random
/// order, so max-pool argmaxes are stable under perturbation.
pub fn random_distinct(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 0.5).collect();
    vals.shuffle(rng);
    Tensor::new(shape, vals).unwrap()
}

/// Smooth moving pattern in `[0, 1]`: shifted sinusoids plus a sliding block.
pub fn synthetic_clip(frames: usize, size: usize) -> Clip {
    let frames = (0..frames)
        .map(|k| {
            Tensor::from_fn(&[3, size, size], |i| {
                let c = i / (size * size);
                let y = (i / size) % size;
                let x = i % size;
                let xs = x as f32 + k as f32;
                let base = 0.5 + 0.25 * ((xs * 0.15 + c as f32).sin() * (y as f32 * 0.11).cos());
                let block = if (x + 2 * k) % 32 < 12 && y % 24 < 10 { 0.2 } else { 0.0 };
                (base + block).clamp(0.0, 1.0)
            })
        })
        .collect();
    Clip::new("synthetic", frames).unwrap()
}

/// `sigmoid(W2 · relu(W1 · mean_hw(x) + b1) + b2)` evaluated with plain loops.
/// `x` is `C×H×W` row-major, `w1` is `(C/2)×C`, `w2` is `C×(C/2)`.
pub fn attention_oracle(x: &[f64], c: usize, hw: usize, w1: &[f64], b1: &[f64], w2: &[f64], b2: &[f64]) -> Vec<f64> {
    let half = c / 2;
    let mean: Vec<f64> = (0..c).map(|k| x[k * hw..(k + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
    let mut hidden = vec![0.0; half];
    for j in 0..half {
        let mut acc = b1[j];
        for k in 0..c {
            acc += w1[j * c + k] * mean[k];
        }
        hidden[j] = acc.max(0.0);
    }
    (0..c)
        .map(|k| {
            let mut acc = b2[k];
            for j in 0..half {
                acc += w2[k * half + j] * hidden[j];
            }
            1.0 / (1.0 + (-acc).exp())
        })
        .collect()
}

/// Mean squared error and PSNR written out directly.
pub fn psnr_oracle(a: &[f64], b: &[f64]) -> f64 {
    let mut sum = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        sum += d * d;
    }
    let mse = sum / a.len() as f64;
    -10.0 * mse.log10()
}

/// SSIM with an explicit 2-D Gaussian window and centred second moments at
/// every valid position.
pub fn ssim_oracle(a: &[f64], b: &[f64], c: usize, h: usize, w: usize) -> f64 {
    const K: usize = 11;
    let sigma: f64 = 1.5;
    let mut win = [[0.0f64; K]; K];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    win.iter_mut().flatten().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut n = 0;
    for ch in 0..c {
        let at = |img: &[f64], y: usize, x: usize| img[(ch * h + y) * w + x];
        for y0 in 0..=h - K {
            for x0 in 0..=w - K {
                let (mut ma, mut mb) = (0.0, 0.0);
                for i in 0..K {
                    for j in 0..K {
                        ma += win[i][j] * at(a, y0 + i, x0 + j);
                        mb += win[i][j] * at(b, y0 + i, x0 + j);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..K {
                    for j in 0..K {
                        let (da, db) = (at(a, y0 + i, x0 + j) - ma, at(b, y0 + i, x0 + j) - mb);
                        va += win[i][j] * da * da;
                        vb += win[i][j] * db * db;
                        cov += win[i][j] * da * db;
                    }
                }
                sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
    }
    sum / n as f64
}
