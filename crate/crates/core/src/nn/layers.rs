//! Parameterised building blocks. Every layer reads its weights from
//! [`ModelParams`] under a caller-chosen name prefix.

use rand_xoshiro::SplitMix64;

use super::params::ModelParams;
use super::tape::{AttnShape, Tape, Var};
use super::tensor::Scalar;
use super::NnError;

/// Weight `[d_in, d_out]` at `{prefix}.w`, bias `[d_out]` at `{prefix}.b`.
pub fn init_linear(params: &mut ModelParams, prefix: &str, d_in: usize, d_out: usize, rng: &mut SplitMix64) {
    params.init_uniform(format!("{prefix}.w"), &[d_in, d_out], d_in, rng);
    params.init_uniform(format!("{prefix}.b"), &[d_out], d_in, rng);
}

pub fn linear<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams, prefix: &str, x: Var) -> Result<Var, NnError> {
    let w = tape.param(params, &format!("{prefix}.w"))?;
    let b = tape.param(params, &format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Stack of linear layers with ReLU between them. `dims` lists every width
/// including input and output.
pub fn init_mlp(params: &mut ModelParams, prefix: &str, dims: &[usize], rng: &mut SplitMix64) {
    for (i, w) in dims.windows(2).enumerate() {
        init_linear(params, &format!("{prefix}.{i}"), w[0], w[1], rng);
    }
}

pub fn mlp<T: Scalar>(tape: &mut Tape<T>, params: &ModelParams, prefix: &str, layers: usize, x: Var) -> Result<Var, NnError> {
    let mut h = x;
    for i in 0..layers {
        h = linear(tape, params, &format!("{prefix}.{i}"), h)?;
        if i + 1 < layers {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

pub fn init_attention(params: &mut ModelParams, prefix: &str, d: usize, rng: &mut SplitMix64) {
    for proj in ["q", "k", "v", "o"] {
        init_linear(params, &format!("{prefix}.{proj}"), d, d, rng);
    }
}

/// Multi-head attention with separate query and key/value inputs.
/// `key_mask[b * tk + j]` marks padded keys.
pub fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ModelParams,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    shape: AttnShape,
    key_mask: Option<&[bool]>,
) -> Result<Var, NnError> {
    let q = linear(tape, params, &format!("{prefix}.q"), q_in)?;
    let k = linear(tape, params, &format!("{prefix}.k"), kv_in)?;
    let v = linear(tape, params, &format!("{prefix}.v"), kv_in)?;
    let a = tape.attention(q, k, v, shape, key_mask)?;
    linear(tape, params, &format!("{prefix}.o"), a)
}
