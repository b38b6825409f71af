use rand::Rng;

use super::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::params::{Attention, Mlp, ParamStore};
use crate::tensor::{Graph, Tensor};

pub const PREFIX: &str = "encoder";

pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, layers: usize, rng: &mut R) {
    for l in 0..layers {
        Attention::init(store, &format!("{PREFIX}.layer{l}.attn"), dim, rng);
        Mlp::init(store, &format!("{PREFIX}.layer{l}.mlp"), (dim, 2 * dim, dim), false, rng);
    }
}

/// Fixed 2-D sinusoidal encoding, `(h·w) × dim`.
///
/// The first half of the channels encodes the row index and the second half
/// the column index, each as interleaved sin/cos pairs over geometrically
/// spaced frequencies. `dim` must be a multiple of 4.
pub fn positional_encoding(h: usize, w: usize, dim: usize) -> Result<Tensor> {
    if dim % 4 != 0 || dim == 0 {
        return Err(Error::Config(format!(
            "positional encoding needs a width divisible by 4, got {dim}"
        )));
    }
    let quarter = dim / 4;
    let mut data = Vec::with_capacity(h * w * dim);
    for y in 0..h {
        for x in 0..w {
            for pos in [y as f64, x as f64] {
                for k in 0..quarter {
                    let freq = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                    data.push((pos * freq).sin());
                    data.push((pos * freq).cos());
                }
            }
        }
    }
    Tensor::new(vec![h * w, dim], data)
}

/// Adds positional encodings once, then applies `layers` residual
/// self-attention + MLP blocks over the tokens.
pub fn encoder_refine(g: &mut Graph, store: &ParamStore, feat: FeatureMap, layers: usize) -> Result<FeatureMap> {
    let dim = g.value(feat.tokens).cols();
    let pe = g.constant(positional_encoding(feat.h, feat.w, dim)?)?;
    let mut x = g.add(feat.tokens, pe)?;
    for l in 0..layers {
        let attn = Attention::bind(store, g, &format!("{PREFIX}.layer{l}.attn"))?;
        let mlp = Mlp::bind(store, g, &format!("{PREFIX}.layer{l}.mlp"))?;
        let a = attn.forward(g, x, x)?;
        x = g.add(x, a)?;
        let m = mlp.forward(g, x)?;
        x = g.add(x, m)?;
    }
    Ok(FeatureMap { tokens: x, ..feat })
}
