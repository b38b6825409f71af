use rand::Rng;

use crate::error::Result;
use crate::image::Image;
use crate::params::{Linear, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub const PREFIX: &str = "backbone";
pub const MIXING_LAYERS: usize = 2;

/// Token grid produced by the backbone and refined by the encoder.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    /// `(h·w) × C`, row-major over the grid.
    pub tokens: Var,
    pub h: usize,
    pub w: usize,
}

pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, patch: usize, dim: usize, rng: &mut R) {
    Linear::init(store, &format!("{PREFIX}.embed"), patch * patch, dim, rng);
    for l in 0..MIXING_LAYERS {
        Linear::init(store, &format!("{PREFIX}.mix{l}"), dim, dim, rng);
    }
}

/// Row-normalized 3×3 neighbourhood averaging over an `h×w` grid (`hw × hw`).
pub fn neighbourhood_mean(h: usize, w: usize) -> Tensor {
    let n = h * w;
    let mut data = vec![0.0; n * n];
    for y in 0..h {
        for x in 0..w {
            let mut cells = Vec::with_capacity(9);
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    cells.push(ny * w + nx);
                }
            }
            let weight = 1.0 / cells.len() as f64;
            for c in cells {
                data[(y * w + x) * n + c] = weight;
            }
        }
    }
    Tensor::new(vec![n, n], data).expect("square")
}

/// Patch embedding followed by residual 3×3 token mixing layers.
pub fn backbone_features(g: &mut Graph, store: &ParamStore, image: &Image, patch: usize) -> Result<FeatureMap> {
    let (patches, h, w) = image.patch_matrix(patch)?;
    let patches = g.constant(patches)?;
    let embed = Linear::bind(store, g, &format!("{PREFIX}.embed"))?;
    let mut x = embed.forward(g, patches)?;
    let mixer = g.constant(neighbourhood_mean(h, w))?;
    for l in 0..MIXING_LAYERS {
        let layer = Linear::bind(store, g, &format!("{PREFIX}.mix{l}"))?;
        let pooled = g.matmul(mixer, x)?;
        let mixed = layer.forward(g, pooled)?;
        let mixed = g.relu(mixed)?;
        x = g.add(x, mixed)?;
    }
    Ok(FeatureMap { tokens: x, h, w })
}
