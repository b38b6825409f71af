//! Hierarchical cross-modal interaction: joint self-attention over the image
//! tokens and the class token, a per-token MLP, then a split back into the two
//! streams (image tokens first, class token last).

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Attention, Mlp, ParamStore};
use crate::tensor::{Graph, Var};

pub const PREFIX: &str = "hcmi";

pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, rng: &mut R) {
    Attention::init(store, &format!("{PREFIX}.attn"), dim, rng);
    Mlp::init(store, &format!("{PREFIX}.mlp"), (dim, 2 * dim, dim), false, rng);
}

/// Single-head self-attention over `T×C` tokens, optionally with a skip from the input.
pub fn self_attention(g: &mut Graph, tokens: Var, attn: &Attention, residual: bool) -> Result<Var> {
    let out = attn.forward(g, tokens, tokens)?;
    if residual {
        g.add(tokens, out)
    } else {
        Ok(out)
    }
}

/// Returns `(e'_img, e'_cls)` with the shapes of the inputs.
pub fn hcmi_forward(
    g: &mut Graph,
    store: &ParamStore,
    e_img: Var,
    e_cls: Var,
    residual: bool,
) -> Result<(Var, Var)> {
    let (m, c) = (g.value(e_img).rows(), g.value(e_img).cols());
    let cls_shape = g.value(e_cls).shape().to_vec();
    if cls_shape != [1, c] {
        return Err(Error::dim(
            "hcmi_forward",
            format!("class embedding {cls_shape:?} vs image width {c}"),
        ));
    }
    let attn = Attention::bind(store, g, &format!("{PREFIX}.attn"))?;
    let mlp = Mlp::bind(store, g, &format!("{PREFIX}.mlp"))?;

    let tokens = g.concat_rows(&[e_img, e_cls])?;
    let mixed = self_attention(g, tokens, &attn, residual)?;
    let projected = mlp.forward(g, mixed)?;
    let out = if residual {
        g.add(mixed, projected)?
    } else {
        projected
    };
    Ok((g.slice_rows(out, 0, m)?, g.slice_rows(out, m, m + 1)?))
}
