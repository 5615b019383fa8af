//! Channel-wise soft attention gate.
//!
//! A feature map `X ∈ R^{C×H×W}` is squeezed to its per-channel spatial mean,
//! passed through a `C → C/2 → C` bottleneck (ReLU inside, sigmoid outside):
//!
//! ```text
//! w = sigmoid(W2 · relu(W1 · mean_hw(X) + b1) + b2)
//! ```
//!
//! Two ways of using the weights are provided. [`apply_attention`] rescales
//! the decoder channels. [`gated_skip`] rescales the encoder channels and adds
//! them onto the decoder, which keeps full-resolution detail available to the
//! decoder; the network uses this one.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Forward, Linear};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tape::Var;

/// `W1: (C/2)×C`, `b1: C/2`, `W2: C×(C/2)`, `b2: C` of one attention block.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub squeeze: Linear,
    pub excite: Linear,
    pub channels: usize,
}

impl AttentionParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels == 0 || channels % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "attention channel count must be even and positive, got {channels}"
            )));
        }
        Ok(AttentionParams {
            squeeze: Linear::new(store, &format!("{name}.fc1"), channels, channels / 2, rng),
            excite: Linear::new(store, &format!("{name}.fc2"), channels / 2, channels, rng),
            channels,
        })
    }
}

fn check_channels<T: Scalar>(f: &Forward<'_, T>, x: Var, params: &AttentionParams, what: &str) -> Result<()> {
    let shape = f.tape.value(x).shape();
    if shape.len() != 3 || shape[0] != params.channels {
        return Err(Error::shape(
            "attention",
            format!("{what} {shape:?} does not have the block's {} channels", params.channels),
        ));
    }
    Ok(())
}

/// Per-channel weights in `(0, 1)` computed from `x` (`C×H×W → C`).
pub fn attention_forward<T: Scalar>(f: &mut Forward<'_, T>, x: Var, params: &AttentionParams) -> Result<Var> {
    check_channels(f, x, params, "input")?;
    let pooled = f.tape.global_mean_pool(x)?;
    let hidden = params.squeeze.forward(f, pooled)?;
    let hidden = f.tape.relu(hidden);
    let logits = params.excite.forward(f, hidden)?;
    Ok(f.tape.sigmoid(logits))
}

/// Scales the decoder channels by attention weights derived from the encoder
/// features at the same level.
pub fn apply_attention<T: Scalar>(
    f: &mut Forward<'_, T>,
    encoder: Var,
    decoder: Var,
    params: &AttentionParams,
) -> Result<Var> {
    check_channels(f, decoder, params, "decoder features")?;
    let weights = attention_forward(f, encoder, params)?;
    f.tape.channel_scale(decoder, weights)
}

/// Gated skip connection: the encoder features, rescaled by their own
/// attention weights, are added onto the decoder features.
pub fn gated_skip<T: Scalar>(
    f: &mut Forward<'_, T>,
    encoder: Var,
    decoder: Var,
    params: &AttentionParams,
) -> Result<Var> {
    let weights = attention_forward(f, encoder, params)?;
    let gated = f.tape.channel_scale(encoder, weights)?;
    f.tape.add(decoder, gated)
}
