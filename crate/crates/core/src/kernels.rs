//! Forward and backward kernels for every differentiable primitive.
//!
//! These are pure functions on tensors. [`crate::tape::Tape`] records calls to
//! them and replays the backward halves in reverse order. Reductions over
//! spatial positions accumulate in `f64`; the convolution products go through
//! GEMM in the tensor's own precision.

use crate::error::{Error, Result};
use crate::linalg::{gemm, MatRef};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry { stride: 1, padding: 1 }
    }
}

struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    h_out: usize,
    w_out: usize,
}

fn conv_dims<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    geo: ConvGeometry,
) -> Result<ConvDims> {
    let (c_in, h, w) = input.dims3("conv2d")?;
    let [c_out, kc, kh, kw] = *kernel.shape() else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be C_out×C_in×k×k, got {:?}", kernel.shape()),
        ));
    };
    if kc != c_in {
        return Err(Error::shape(
            "conv2d",
            format!(
                "kernel {:?} expects {kc} input channels but input is {:?}",
                kernel.shape(),
                input.shape()
            ),
        ));
    }
    if kh != kw {
        return Err(Error::shape("conv2d", format!("kernel must be square, got {:?}", kernel.shape())));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shape(
            "conv2d",
            format!("bias {:?} does not match {c_out} output channels", bias.shape()),
        ));
    }
    if geo.stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be at least 1".into()));
    }
    if h + 2 * geo.padding < kh || w + 2 * geo.padding < kh {
        return Err(Error::shape(
            "conv2d",
            format!("padded input {h}×{w} (padding {}) is smaller than kernel {kh}", geo.padding),
        ));
    }
    Ok(ConvDims {
        c_in,
        h,
        w,
        c_out,
        k: kh,
        h_out: (h + 2 * geo.padding - kh) / geo.stride + 1,
        w_out: (w + 2 * geo.padding - kh) / geo.stride + 1,
    })
}

/// Unfolds receptive fields into a `(C_in·k·k) × (H'·W')` matrix.
fn im2col<T: Scalar>(input: &[T], d: &ConvDims, geo: ConvGeometry, col: &mut [T]) {
    let p = d.h_out * d.w_out;
    let pad = geo.padding as isize;
    for c in 0..d.c_in {
        let plane = &input[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (c * d.k + ki) * d.k + kj;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..d.h_out {
                    let iy = (oy * geo.stride + ki) as isize - pad;
                    let out_row = &mut dst[oy * d.w_out..(oy + 1) * d.w_out];
                    if iy < 0 || iy >= d.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    if geo.stride == 1 {
                        // valid ox range: 0 <= ox + kj - pad < w
                        let shift = kj as isize - pad;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((d.w as isize - shift).min(d.w_out as isize)).max(lo as isize) as usize;
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        if hi > lo {
                            let s = (lo as isize + shift) as usize;
                            out_row[lo..hi].copy_from_slice(&src[s..s + (hi - lo)]);
                        }
                    } else {
                        for (ox, v) in out_row.iter_mut().enumerate() {
                            let ix = (ox * geo.stride + kj) as isize - pad;
                            *v = if ix < 0 || ix >= d.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
fn col2im<T: Scalar>(col: &[T], d: &ConvDims, geo: ConvGeometry, out: &mut [T]) {
    let p = d.h_out * d.w_out;
    let pad = geo.padding as isize;
    for c in 0..d.c_in {
        let plane = &mut out[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (c * d.k + ki) * d.k + kj;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..d.h_out {
                    let iy = (oy * geo.stride + ki) as isize - pad;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    for ox in 0..d.w_out {
                        let ix = (ox * geo.stride + kj) as isize - pad;
                        if ix >= 0 && ix < d.w as isize {
                            dst[ix as usize] += src[oy * d.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    geo: ConvGeometry,
) -> Result<Tensor<T>> {
    let d = conv_dims(input, kernel, bias, geo)?;
    let p = d.h_out * d.w_out;
    let ckk = d.c_in * d.k * d.k;
    let mut out = vec![T::zero(); d.c_out * p];
    for (c, row) in out.chunks_exact_mut(p).enumerate() {
        row.fill(bias.data()[c]);
    }
    if d.k == 1 && geo.stride == 1 && geo.padding == 0 {
        gemm(MatRef::rows(kernel.data(), d.c_out, ckk), MatRef::rows(input.data(), ckk, p), T::one(), &mut out);
    } else {
        let mut col = vec![T::zero(); ckk * p];
        im2col(input.data(), &d, geo, &mut col);
        gemm(MatRef::rows(kernel.data(), d.c_out, ckk), MatRef::rows(&col, ckk, p), T::one(), &mut out);
    }
    Tensor::new(&[d.c_out, d.h_out, d.w_out], out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    geo: ConvGeometry,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let d = conv_dims(input, kernel, bias, geo)?;
    let p = d.h_out * d.w_out;
    let ckk = d.c_in * d.k * d.k;
    let g = grad_out.data();
    let mut col = vec![T::zero(); ckk * p];
    im2col(input.data(), &d, geo, &mut col);

    let mut gk = vec![T::zero(); d.c_out * ckk];
    gemm(MatRef::rows(g, d.c_out, p), MatRef::transposed(&col, p, ckk), T::zero(), &mut gk);

    let gb: Vec<T> = g.chunks_exact(p).map(|row| T::of(row.iter().map(|v| v.f64()).sum())).collect();

    let gin = if need_input {
        // reuse the column buffer for Kᵀ · g
        gemm(MatRef::transposed(kernel.data(), ckk, d.c_out), MatRef::rows(g, d.c_out, p), T::zero(), &mut col);
        let mut gi = vec![T::zero(); d.c_in * d.h * d.w];
        col2im(&col, &d, geo, &mut gi);
        Some(Tensor::new(input.shape(), gi)?)
    } else {
        None
    };
    Ok(ConvGrads { input: gin, kernel: Tensor::new(kernel.shape(), gk)?, bias: Tensor::new(bias.shape(), gb)? })
}

fn deconv_dims<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let (c_in, h, w) = input.dims3("deconv2d")?;
    let [kc, c_out, 2, 2] = *kernel.shape() else {
        return Err(Error::shape(
            "deconv2d",
            format!("kernel must be C_in×C_out×2×2, got {:?}", kernel.shape()),
        ));
    };
    if kc != c_in {
        return Err(Error::shape(
            "deconv2d",
            format!(
                "kernel {:?} expects {kc} input channels but input is {:?}",
                kernel.shape(),
                input.shape()
            ),
        ));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shape(
            "deconv2d",
            format!("bias {:?} does not match {c_out} output channels", bias.shape()),
        ));
    }
    Ok((c_in, c_out, h, w))
}

/// Stride-2 transposed convolution with a 2×2 kernel: doubles H and W.
pub fn deconv2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (c_in, c_out, h, w) = deconv_dims(input, kernel, bias)?;
    let hw = h * w;
    // blocks[(co·4 + i·2 + j), y·W + x] = Σ_ci K[ci, co, i, j] · in[ci, y, x]
    let mut blocks = vec![T::zero(); c_out * 4 * hw];
    gemm(
        MatRef::transposed(kernel.data(), c_out * 4, c_in),
        MatRef::rows(input.data(), c_in, hw),
        T::zero(),
        &mut blocks,
    );
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c_out * ho * wo];
    for co in 0..c_out {
        let b = bias.data()[co];
        for i in 0..2 {
            for j in 0..2 {
                let src = &blocks[(co * 4 + i * 2 + j) * hw..][..hw];
                for y in 0..h {
                    let dst = &mut out[(co * ho + 2 * y + i) * wo..][..wo];
                    for x in 0..w {
                        dst[2 * x + j] = src[y * w + x] + b;
                    }
                }
            }
        }
    }
    Tensor::new(&[c_out, ho, wo], out)
}

pub fn deconv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let (c_in, c_out, h, w) = deconv_dims(input, kernel, bias)?;
    let hw = h * w;
    let (ho, wo) = (2 * h, 2 * w);
    let g = grad_out.data();
    let mut gblocks = vec![T::zero(); c_out * 4 * hw];
    let mut gb = Vec::with_capacity(c_out);
    for co in 0..c_out {
        gb.push(T::of(g[co * ho * wo..(co + 1) * ho * wo].iter().map(|v| v.f64()).sum()));
        for i in 0..2 {
            for j in 0..2 {
                let dst = &mut gblocks[(co * 4 + i * 2 + j) * hw..][..hw];
                for y in 0..h {
                    let src = &g[(co * ho + 2 * y + i) * wo..][..wo];
                    for x in 0..w {
                        dst[y * w + x] = src[2 * x + j];
                    }
                }
            }
        }
    }
    let mut gk = vec![T::zero(); c_in * c_out * 4];
    gemm(MatRef::rows(input.data(), c_in, hw), MatRef::transposed(&gblocks, hw, c_out * 4), T::zero(), &mut gk);
    let gin = if need_input {
        let mut gi = vec![T::zero(); c_in * hw];
        gemm(MatRef::rows(kernel.data(), c_in, c_out * 4), MatRef::rows(&gblocks, c_out * 4, hw), T::zero(), &mut gi);
        Some(Tensor::new(input.shape(), gi)?)
    } else {
        None
    };
    Ok(ConvGrads { input: gin, kernel: Tensor::new(kernel.shape(), gk)?, bias: Tensor::new(bias.shape(), gb)? })
}

/// Max pooling. Returns the pooled tensor and, for every output element, the
/// flat input index of its first (row-major) maximum.
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, window: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = input.dims3("maxpool2d")?;
    if window == 0 || stride == 0 {
        return Err(Error::InvalidArgument("maxpool2d window and stride must be at least 1".into()));
    }
    if h % stride != 0 || w % stride != 0 {
        return Err(Error::shape(
            "maxpool2d",
            format!("spatial dims {h}×{w} must be divisible by the stride {stride}"),
        ));
    }
    if window > h || window > w {
        return Err(Error::shape("maxpool2d", format!("window {window} exceeds input {h}×{w}")));
    }
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let x = input.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = ch * h * w + oy * stride * w + ox * stride;
                for dy in 0..window {
                    for dx in 0..window {
                        let idx = ch * h * w + (oy * stride + dy) * w + ox * stride + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[c, ho, wo], out)?, arg))
}

pub fn maxpool2d_backward<T: Scalar>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut g = Tensor::zeros(input_shape);
    let gd = g.data_mut();
    for (&idx, &v) in argmax.iter().zip(grad_out.data()) {
        gd[idx] += v;
    }
    g
}

/// Per-channel spatial statistics from a training-mode batch-norm pass.
#[derive(Debug, Clone)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

pub struct BatchNormTrain<T> {
    pub output: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<f64>,
    pub stats: ChannelStats,
}

fn check_affine<T: Scalar>(op: &'static str, c: usize, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            op,
            format!("gamma {:?} / beta {:?} must both be [{c}]", gamma.shape(), beta.shape()),
        ));
    }
    Ok(())
}

/// Batch normalization with batch size one: statistics over spatial positions.
pub fn batchnorm_train<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<BatchNormTrain<T>> {
    let (c, h, w) = input.dims3("batchnorm")?;
    check_affine("batchnorm", c, gamma, beta)?;
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("batchnorm eps must be positive, got {eps}")));
    }
    let n = h * w;
    let mut out = vec![T::zero(); c * n];
    let mut xhat = vec![T::zero(); c * n];
    let mut stats = ChannelStats { mean: Vec::with_capacity(c), var: Vec::with_capacity(c), count: n };
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = &input.data()[ch * n..(ch + 1) * n];
        let mean = plane.iter().map(|v| v.f64()).sum::<f64>() / n as f64;
        let var = plane.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let (g, b) = (gamma.data()[ch].f64(), beta.data()[ch].f64());
        for i in 0..n {
            let xh = (plane[i].f64() - mean) * inv;
            xhat[ch * n + i] = T::of(xh);
            out[ch * n + i] = T::of(g * xh + b);
        }
        stats.mean.push(mean);
        stats.var.push(var);
        inv_std.push(inv);
    }
    Ok(BatchNormTrain {
        output: Tensor::new(input.shape(), out)?,
        xhat: Tensor::new(input.shape(), xhat)?,
        inv_std,
        stats,
    })
}

pub struct AffineGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

pub fn batchnorm_train_backward<T: Scalar>(
    xhat: &Tensor<T>,
    inv_std: &[f64],
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<AffineGrads<T>> {
    let (c, h, w) = xhat.dims3("batchnorm")?;
    let n = h * w;
    let nf = n as f64;
    let mut gi = vec![T::zero(); c * n];
    let mut gg = Vec::with_capacity(c);
    let mut gbeta = Vec::with_capacity(c);
    for ch in 0..c {
        let dy = &grad_out.data()[ch * n..(ch + 1) * n];
        let xh = &xhat.data()[ch * n..(ch + 1) * n];
        let sum_dy: f64 = dy.iter().map(|v| v.f64()).sum();
        let sum_dy_xh: f64 = dy.iter().zip(xh).map(|(a, b)| a.f64() * b.f64()).sum();
        let g = gamma.data()[ch].f64();
        let scale = g * inv_std[ch] / nf;
        for i in 0..n {
            gi[ch * n + i] = T::of(scale * (nf * dy[i].f64() - sum_dy - xh[i].f64() * sum_dy_xh));
        }
        gg.push(T::of(sum_dy_xh));
        gbeta.push(T::of(sum_dy));
    }
    Ok(AffineGrads {
        input: Tensor::new(xhat.shape(), gi)?,
        gamma: Tensor::new(&[c], gg)?,
        beta: Tensor::new(&[c], gbeta)?,
    })
}

/// Inference-mode batch normalization against running statistics.
pub fn batchnorm_eval<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, Tensor<T>, Vec<f64>)> {
    let (c, h, w) = input.dims3("batchnorm")?;
    check_affine("batchnorm", c, gamma, beta)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(Error::shape("batchnorm", format!("running statistics must be [{c}]")));
    }
    let n = h * w;
    let mut out = vec![T::zero(); c * n];
    let mut xhat = vec![T::zero(); c * n];
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let mean = running_mean.data()[ch].f64();
        let inv = 1.0 / (running_var.data()[ch].f64() + eps).sqrt();
        let (g, b) = (gamma.data()[ch].f64(), beta.data()[ch].f64());
        for i in 0..n {
            let xh = (input.data()[ch * n + i].f64() - mean) * inv;
            xhat[ch * n + i] = T::of(xh);
            out[ch * n + i] = T::of(g * xh + b);
        }
        inv_std.push(inv);
    }
    Ok((Tensor::new(input.shape(), out)?, Tensor::new(input.shape(), xhat)?, inv_std))
}

pub fn batchnorm_eval_backward<T: Scalar>(
    xhat: &Tensor<T>,
    inv_std: &[f64],
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<AffineGrads<T>> {
    let (c, h, w) = xhat.dims3("batchnorm")?;
    let n = h * w;
    let mut gi = vec![T::zero(); c * n];
    let mut gg = Vec::with_capacity(c);
    let mut gbeta = Vec::with_capacity(c);
    for ch in 0..c {
        let dy = &grad_out.data()[ch * n..(ch + 1) * n];
        let xh = &xhat.data()[ch * n..(ch + 1) * n];
        let s = gamma.data()[ch].f64() * inv_std[ch];
        for i in 0..n {
            gi[ch * n + i] = T::of(dy[i].f64() * s);
        }
        gg.push(T::of(dy.iter().zip(xh).map(|(a, b)| a.f64() * b.f64()).sum()));
        gbeta.push(T::of(dy.iter().map(|v| v.f64()).sum()));
    }
    Ok(AffineGrads {
        input: Tensor::new(xhat.shape(), gi)?,
        gamma: Tensor::new(&[c], gg)?,
        beta: Tensor::new(&[c], gbeta)?,
    })
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Takes the forward output `y = sigmoid(x)`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = y.data().iter().zip(grad_out.data()).map(|(&s, &g)| g * s * (T::one() - s)).collect();
    Tensor::new(y.shape(), data).expect("same shape")
}

fn fc_dims<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize)> {
    let [m, n] = *weights.shape() else {
        return Err(Error::shape("fully_connected", format!("weights must be M×N, got {:?}", weights.shape())));
    };
    if input.shape() != [n] || bias.shape() != [m] {
        return Err(Error::shape(
            "fully_connected",
            format!(
                "weights {:?} need input [{n}] and bias [{m}], got {:?} and {:?}",
                weights.shape(),
                input.shape(),
                bias.shape()
            ),
        ));
    }
    Ok((m, n))
}

pub struct FcGrads<T> {
    pub input: Tensor<T>,
    pub weights: Tensor<T>,
    pub bias: Tensor<T>,
}

/// `W · x + b` for a vector input.
pub fn fully_connected<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = fc_dims(input, weights, bias)?;
    let x = input.data();
    let out = (0..m)
        .map(|r| {
            let row = &weights.data()[r * n..(r + 1) * n];
            let acc: f64 = row.iter().zip(x).map(|(a, b)| a.f64() * b.f64()).sum();
            T::of(acc + bias.data()[r].f64())
        })
        .collect();
    Tensor::new(&[m], out)
}

pub fn fully_connected_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<FcGrads<T>> {
    let (m, n) = fc_dims(input, weights, bias)?;
    let g = grad_out.data();
    let gi = (0..n)
        .map(|c| T::of((0..m).map(|r| weights.data()[r * n + c].f64() * g[r].f64()).sum()))
        .collect();
    let gw = (0..m * n).map(|i| g[i / n] * input.data()[i % n]).collect();
    Ok(FcGrads { input: Tensor::new(&[n], gi)?, weights: Tensor::new(&[m, n], gw)?, bias: grad_out.clone() })
}

/// Spatial mean per channel: `C×H×W → C`. Each plane is summed in sorted
/// order so the result is bit-identical under any spatial permutation.
pub fn global_mean_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3("global_mean_pool")?;
    let n = h * w;
    let mut sorted = vec![0.0f64; n];
    let out = input
        .data()
        .chunks_exact(n)
        .map(|plane| {
            sorted.iter_mut().zip(plane).for_each(|(s, v)| *s = v.f64());
            sorted.sort_unstable_by(f64::total_cmp);
            T::of(sorted.iter().sum::<f64>() / n as f64)
        })
        .collect();
    Tensor::new(&[c], out)
}

pub fn global_mean_pool_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let n = input_shape[1] * input_shape[2];
    let scale = T::of(1.0 / n as f64);
    let mut g = Tensor::zeros(input_shape);
    for (plane, &go) in g.data_mut().chunks_exact_mut(n).zip(grad_out.data()) {
        plane.fill(go * scale);
    }
    g
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape(), data)
}

/// Multiplies every spatial position of channel `c` by `weights[c]`.
pub fn channel_scale<T: Scalar>(features: &Tensor<T>, weights: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = features.dims3("channel_scale")?;
    if weights.shape() != [c] {
        return Err(Error::shape(
            "channel_scale",
            format!("weights {:?} do not match features {:?}", weights.shape(), features.shape()),
        ));
    }
    let n = h * w;
    let mut out = features.clone();
    for (plane, &s) in out.data_mut().chunks_exact_mut(n).zip(weights.data()) {
        plane.iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}

pub fn channel_scale_backward<T: Scalar>(
    features: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let n = features.shape()[1] * features.shape()[2];
    let gf = channel_scale(grad_out, weights).expect("shapes checked in forward");
    let gw = features
        .data()
        .chunks_exact(n)
        .zip(grad_out.data().chunks_exact(n))
        .map(|(f, g)| T::of(f.iter().zip(g).map(|(a, b)| a.f64() * b.f64()).sum()))
        .collect();
    (gf, Tensor::new(weights.shape(), gw).expect("same shape"))
}

/// Concatenates `C_i×H×W` tensors along the channel axis.
pub fn stack_channels<T: Scalar>(frames: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InvalidArgument("stack_channels needs at least one tensor".into()))?;
    let (_, h, w) = first.dims3("stack_channels")?;
    let mut c_total = 0;
    for f in frames {
        let (c, fh, fw) = f.dims3("stack_channels")?;
        if (fh, fw) != (h, w) {
            return Err(Error::shape(
                "stack_channels",
                format!("frame {:?} does not match {:?}", f.shape(), first.shape()),
            ));
        }
        c_total += c;
    }
    let mut data = Vec::with_capacity(c_total * h * w);
    for f in frames {
        data.extend_from_slice(f.data());
    }
    Tensor::new(&[c_total, h, w], data)
}

/// Mean of squared differences, as a one-element tensor.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Tensor<T>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("mse_loss", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    let sum: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a.f64() - b.f64()).powi(2)).sum();
    Ok(Tensor::scalar(T::of(sum / pred.len() as f64)))
}

/// Gradient of [`mse_loss`] with respect to `pred`; the target gradient is its negation.
pub fn mse_loss_backward<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, grad_out: T) -> Tensor<T> {
    let scale = 2.0 * grad_out.f64() / pred.len() as f64;
    let data = pred.data().iter().zip(target.data()).map(|(a, b)| T::of(scale * (a.f64() - b.f64()))).collect();
    Tensor::new(pred.shape(), data).expect("same shape")
}
