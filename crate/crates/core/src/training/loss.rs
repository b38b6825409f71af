use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Heatmap loss weight.
pub const DEFAULT_LAMBDA_HEATMAP: f64 = 2.0;
/// Gaussian target spread, in grid cells.
pub const DEFAULT_SIGMA: f64 = 1.5;

/// Per-pixel penalty inside the heatmap loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeatmapNorm {
    /// Squared error.
    #[default]
    L2,
    /// Absolute error.
    L1,
}

/// Gaussian bumps centred on `coords` (normalized `(x, y)`), `N×h×w`.
pub fn gaussian_target(coords: &Tensor, h: usize, w: usize, sigma: f64) -> Result<Tensor> {
    if coords.cols() != 2 || coords.shape().len() != 2 {
        return Err(Error::dim("gaussian_target", "coords must be N×2"));
    }
    if coords.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Input("target coordinates must lie in [0, 1]".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Input("sigma must be positive".into()));
    }
    let n = coords.rows();
    let denom = 2.0 * sigma * sigma;
    let mut data = Vec::with_capacity(n * h * w);
    for i in 0..n {
        let tx = coords.get(i, 0) * w as f64;
        let ty = coords.get(i, 1) * h as f64;
        for y in 0..h {
            for x in 0..w {
                let dx = x as f64 + 0.5 - tx;
                let dy = y as f64 + 0.5 - ty;
                data.push((-(dx * dx + dy * dy) / denom).exp());
            }
        }
    }
    Tensor::new(vec![n, h, w], data)
}

/// `(1/N) Σ_i (1/(h·w)) Σ_p φ(sigmoid(H_i[p]) − Ĥ_i[p])` with `φ` per [`HeatmapNorm`].
///
/// `logits` may be `N×(h·w)` or `N×h×w`; `target` must hold the same number of values per row.
pub fn heatmap_loss(g: &mut Graph, logits: Var, target: &Tensor, norm: HeatmapNorm) -> Result<Var> {
    let lv = g.value(logits);
    if lv.rows() != target.rows() || lv.cols() != target.cols() {
        return Err(Error::dim(
            "heatmap_loss",
            format!("logits {:?} vs target {:?}", lv.shape(), target.shape()),
        ));
    }
    let flat = vec![lv.rows(), lv.cols()];
    let logits = g.reshape(logits, flat.clone())?;
    let target = g.constant(target.reshape(flat)?)?;
    let prob = g.sigmoid(logits)?;
    let diff = g.sub(prob, target)?;
    let per_pixel = match norm {
        HeatmapNorm::L2 => g.square(diff)?,
        HeatmapNorm::L1 => g.abs(diff)?,
    };
    g.mean(per_pixel)
}

/// `(1/L) Σ_l Σ_i |P^l_i − P̂_i|₁` over decoder layers.
pub fn offset_loss(g: &mut Graph, layers: &[Var], target: &Tensor) -> Result<Var> {
    if layers.is_empty() {
        return Err(Error::dim("offset_loss", "no decoder layers"));
    }
    let t = g.constant(target.clone())?;
    let mut acc: Option<Var> = None;
    for &p in layers {
        if g.value(p).shape() != target.shape() {
            return Err(Error::dim(
                "offset_loss",
                format!("{:?} vs target {:?}", g.value(p).shape(), target.shape()),
            ));
        }
        let d = g.sub(p, t)?;
        let d = g.abs(d)?;
        let s = g.sum(d)?;
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    g.scale(acc.expect("non-empty"), 1.0 / layers.len() as f64)
}

/// Scalar summary of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub heatmap: f64,
    pub offset: f64,
    pub total: f64,
    pub lambda_heatmap: f64,
}

pub fn total_loss(heatmap: f64, offset: f64, lambda_heatmap: f64) -> LossBreakdown {
    LossBreakdown {
        heatmap,
        offset,
        total: lambda_heatmap * heatmap + offset,
        lambda_heatmap,
    }
}

/// Graph form of [`total_loss`]; evaluates the same expression, so the node
/// value equals `total_loss(..).total` bit for bit.
pub fn total_loss_var(g: &mut Graph, heatmap: Var, offset: Var, lambda_heatmap: f64) -> Result<Var> {
    let weighted = g.scale(heatmap, lambda_heatmap)?;
    g.add(weighted, offset)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_peak_and_sigma_point() {
        // Cell (2,1) centre is at (2.5, 1.5) in a 4×4 grid.
        let c = Tensor::from_rows(&[&[2.5 / 4.0, 1.5 / 4.0]]).unwrap();
        let t = gaussian_target(&c, 4, 4, 1.5).unwrap();
        assert_eq!(t.data()[4 + 2], 1.0);
        // One cell to the right lies at distance 1; use sigma = 1.
        let t = gaussian_target(&c, 4, 4, 1.0).unwrap();
        assert!((t.data()[4 + 3] - (-0.5f64).exp()).abs() < 1e-15);
        assert!(((-0.5f64).exp() - 0.6065).abs() < 1e-4);
    }

    #[test]
    fn gaussian_rejects_out_of_range() {
        let c = Tensor::from_rows(&[&[1.2, 0.5]]).unwrap();
        assert!(matches!(gaussian_target(&c, 4, 4, 1.5), Err(Error::Input(_))));
    }

    #[test]
    fn heatmap_loss_exact_fit_and_half_point() {
        let target = Tensor::new(vec![2, 2, 2], vec![0.1, 0.3, 0.5, 0.7, 0.9, 0.2, 0.4, 0.6]).unwrap();
        let logit = target.map(|p| (p / (1.0 - p)).ln()).reshape(vec![2, 4]).unwrap();
        let mut g = Graph::new();
        let l = g.constant(logit).unwrap();
        let loss = heatmap_loss(&mut g, l, &target, HeatmapNorm::L2).unwrap();
        assert!(g.value(loss).item().unwrap() <= 1e-12);

        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(vec![3, 9])).unwrap();
        let half = Tensor::full(vec![3, 3, 3], 0.5);
        for norm in [HeatmapNorm::L2, HeatmapNorm::L1] {
            let loss = heatmap_loss(&mut g, z, &half, norm).unwrap();
            assert_eq!(g.value(loss).item().unwrap(), 0.0);
        }
    }

    #[test]
    fn offset_loss_hand_case() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_rows(&[&[0.2, 0.2]]).unwrap()).unwrap();
        let target = Tensor::from_rows(&[&[0.5, 0.6]]).unwrap();
        let loss = offset_loss(&mut g, &[p], &target).unwrap();
        assert!((g.value(loss).item().unwrap() - 0.7).abs() < 1e-15);
        let q = g.constant(target.clone()).unwrap();
        let zero = offset_loss(&mut g, &[q, q, q], &target).unwrap();
        assert_eq!(g.value(zero).item().unwrap(), 0.0);
    }

    #[test]
    fn total_loss_weights() {
        assert_eq!(total_loss(0.1, 0.3, 2.0).total, 0.5);
        assert_eq!(total_loss(0.0, 0.0, 2.0).total, 0.0);
        assert_eq!(total_loss(0.1, 0.3, 1.0).total, 0.1 + 0.3);
    }

    #[test]
    fn shape_mismatches() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(vec![2, 4])).unwrap();
        assert!(heatmap_loss(&mut g, l, &Tensor::zeros(vec![2, 3, 3]), HeatmapNorm::L2).is_err());
        assert!(offset_loss(&mut g, &[l], &Tensor::zeros(vec![2, 2])).is_err());
        assert!(offset_loss(&mut g, &[], &Tensor::zeros(vec![2, 2])).is_err());
    }
}
