//! Spatio-temporal network: a two-level encoder–decoder over three stacked
//! RGB frames. Skip connections carry encoder features, rescaled per channel
//! by an attention block, and add them onto the upsampled decoder features
//! instead of concatenating.
//!
//! ```text
//! stack(3 frames) 9×H×W
//!   enc0  conv 9→64, 64→64          ── e0 ──┐
//!   pool                                    │
//!   enc1  conv 64→128, 128→128      ── e1 ──┼──┐
//!   pool                                    │  │
//!   bottleneck conv 128→256, 256→256        │  │
//!   up1 deconv 256→128 + gate(attn1, e1) ◄──┼──┘
//!   dec1  conv 128→128, 128→128             │
//!   up0 deconv 128→64  + gate(attn0, e0) ◄──┘
//!   dec0  conv 64→64, 64→64
//!   out   conv 64→3 (no BN, no ReLU)
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{gated_skip, AttentionParams};
use crate::error::{Error, Result};
use crate::layers::{Conv, ConvBnRelu, Deconv, Forward};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::Var;

/// Channel widths per level; the bottleneck width is the cap.
pub const LEVEL_CHANNELS: [usize; 3] = [64, 128, 256];
pub const FRAMES_PER_STN: usize = 3;
pub const IMAGE_CHANNELS: usize = 3;
/// Spatial dims must be multiples of this (two 2× poolings).
pub const SPATIAL_MULTIPLE: usize = 4;

#[derive(Debug, Clone)]
pub struct StnParams {
    pub enc0: [ConvBnRelu; 2],
    pub enc1: [ConvBnRelu; 2],
    pub bottleneck: [ConvBnRelu; 2],
    pub up1: Deconv,
    pub dec1: [ConvBnRelu; 2],
    pub up0: Deconv,
    pub dec0: [ConvBnRelu; 2],
    pub out_conv: Conv,
    pub attn1: AttentionParams,
    pub attn0: AttentionParams,
}

impl StnParams {
    /// Registers one network's parameters under `prefix`, drawing Xavier
    /// weights from `rng` in a fixed order.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, rng: &mut ChaCha8Rng) -> Self {
        let [c0, c1, c2] = LEVEL_CHANNELS;
        let n = |s: &str| format!("{prefix}.{s}");
        let pair = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize| {
            [
                ConvBnRelu::new(store, &n(&format!("{name}.0")), c_in, c_out, rng),
                ConvBnRelu::new(store, &n(&format!("{name}.1")), c_out, c_out, rng),
            ]
        };
        let enc0 = pair(store, rng, "enc0", FRAMES_PER_STN * IMAGE_CHANNELS, c0);
        let enc1 = pair(store, rng, "enc1", c0, c1);
        let bottleneck = pair(store, rng, "bottleneck", c1, c2);
        let up1 = Deconv::new(store, &n("up1"), c2, c1, rng);
        let dec1 = pair(store, rng, "dec1", c1, c1);
        let up0 = Deconv::new(store, &n("up0"), c1, c0, rng);
        let dec0 = pair(store, rng, "dec0", c0, c0);
        let out_conv = Conv::new(store, &n("out_conv"), c0, IMAGE_CHANNELS, 3, rng);
        let attn1 = AttentionParams::new(store, &n("attn1"), c1, rng).expect("even width");
        let attn0 = AttentionParams::new(store, &n("attn0"), c0, rng).expect("even width");
        StnParams { enc0, enc1, bottleneck, up1, dec1, up0, dec0, out_conv, attn1, attn0 }
    }

    /// Zeroes the final convolution, making the network output identically zero.
    pub fn zero_output<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.value_mut(self.out_conv.weight).fill(T::zero());
        store.value_mut(self.out_conv.bias).fill(T::zero());
    }
}

/// Fresh single-network parameters from a seed.
pub fn stn_init<T: Scalar>(seed: u64) -> (ParamStore<T>, StnParams) {
    let mut store = ParamStore::new();
    let params = StnParams::new(&mut store, "stn", &mut ChaCha8Rng::seed_from_u64(seed));
    (store, params)
}

fn pair<T: Scalar>(f: &mut Forward<'_, T>, layers: &[ConvBnRelu; 2], x: Var) -> Result<Var> {
    let x = layers[0].forward(f, x)?;
    layers[1].forward(f, x)
}

/// Three `3×H×W` frames in, one `3×H×W` map out.
pub fn stn_forward<T: Scalar>(f: &mut Forward<'_, T>, frames: &[Var], params: &StnParams) -> Result<Var> {
    if frames.len() != FRAMES_PER_STN {
        return Err(Error::InvalidArgument(format!(
            "spatio-temporal network takes {FRAMES_PER_STN} frames, got {}",
            frames.len()
        )));
    }
    let (c, h, w) = f.tape.value(frames[0]).dims3("stn_forward")?;
    if c != IMAGE_CHANNELS {
        return Err(Error::shape("stn_forward", format!("frames must be 3×H×W, got {c}×{h}×{w}")));
    }
    if h % SPATIAL_MULTIPLE != 0 || w % SPATIAL_MULTIPLE != 0 {
        return Err(Error::shape(
            "stn_forward",
            format!("frame size {h}×{w} must be divisible by {SPATIAL_MULTIPLE} in both dimensions"),
        ));
    }
    let x = f.tape.stack_channels(frames)?;

    let e0 = pair(f, &params.enc0, x)?;
    let x = f.tape.maxpool2d(e0, 2, 2)?;
    let e1 = pair(f, &params.enc1, x)?;
    let x = f.tape.maxpool2d(e1, 2, 2)?;
    let x = pair(f, &params.bottleneck, x)?;

    let x = params.up1.forward(f, x)?;
    let x = gated_skip(f, e1, x, &params.attn1)?;
    let x = pair(f, &params.dec1, x)?;

    let x = params.up0.forward(f, x)?;
    let x = gated_skip(f, e0, x, &params.attn0)?;
    let x = pair(f, &params.dec0, x)?;

    params.out_conv.forward(f, x)
}
