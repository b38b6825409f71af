use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reporting thresholds.
pub const STANDARD_THRESHOLDS: [f64; 5] = [0.05, 0.1, 0.15, 0.2, 0.25];

/// Fraction of joints whose Euclidean error is at most `tau` times the
/// longest bbox side (inclusive).
pub fn pck(pred: &Tensor, gt: &Tensor, bbox: &BBox, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Input(format!("PCK threshold must be positive, got {tau}")));
    }
    if pred.shape() != gt.shape() || gt.cols() != 2 {
        return Err(Error::dim(
            "pck",
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    let n = gt.rows();
    if n == 0 {
        return Err(Error::Input("no joints to score".into()));
    }
    let limit = tau * bbox.longest_side();
    let hits = (0..n)
        .filter(|&i| {
            let dx = pred.get(i, 0) - gt.get(i, 0);
            let dy = pred.get(i, 1) - gt.get(i, 1);
            (dx * dx + dy * dy).sqrt() <= limit
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Expected PCK of uniformly random predictions in the unit square,
/// averaged over `trials` draws for every `(keypoints, bbox)` pair.
pub fn chance_pck(samples: &[(Tensor, BBox)], tau: f64, trials: usize, seed: u64) -> Result<f64> {
    if samples.is_empty() || trials == 0 {
        return Err(Error::Input("chance baseline needs samples and trials".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..trials {
        for (gt, bbox) in samples {
            let data = (0..gt.len()).map(|_| rng.random::<f64>()).collect();
            let pred = Tensor::new(gt.shape().to_vec(), data)?;
            total += pck(&pred, gt, bbox, tau)?;
        }
    }
    Ok(total / (trials * samples.len()) as f64)
}
