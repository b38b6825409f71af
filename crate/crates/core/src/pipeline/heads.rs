//! Similarity proposals and heatmap/offset decoding.

use super::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Raw similarity logits `H[i, p] = ⟨joints[i], tokens[p]⟩`, shaped `N × (h·w)`.
pub fn proposal_heatmaps(g: &mut Graph, feat: FeatureMap, joints: Var) -> Result<Var> {
    let (jc, fc) = (g.value(joints).cols(), g.value(feat.tokens).cols());
    if jc != fc {
        return Err(Error::dim("proposal_heatmaps", format!("joint width {jc} vs feature width {fc}")));
    }
    let tokens_t = g.transpose(feat.tokens)?;
    g.matmul(joints, tokens_t)
}

/// Dense offset field pointing from every cell centre toward `locations`
/// (normalized `(x, y)`), in cell units, each component clamped to `±radius`.
/// Returns `N×h×w×2`.
pub fn offsets_toward(locations: &Tensor, h: usize, w: usize, radius: f64) -> Result<Tensor> {
    if locations.cols() != 2 {
        return Err(Error::dim("offsets_toward", "locations must be N×2"));
    }
    let n = locations.rows();
    let mut data = Vec::with_capacity(n * h * w * 2);
    for i in 0..n {
        let tx = locations.get(i, 0) * w as f64;
        let ty = locations.get(i, 1) * h as f64;
        for y in 0..h {
            for x in 0..w {
                data.push((tx - (x as f64 + 0.5)).clamp(-radius, radius));
                data.push((ty - (y as f64 + 0.5)).clamp(-radius, radius));
            }
        }
    }
    Tensor::new(vec![n, h, w, 2], data)
}

/// Argmax cell per joint (ties resolve to the lowest row-major index) plus
/// the offset stored at that cell, normalized by the grid extents and clamped
/// to `[0, 1]`. Output is `N×2` in `(x, y)` order.
pub fn decode_keypoints(heatmaps: &Tensor, offsets: &Tensor) -> Result<Tensor> {
    let &[n, h, w] = heatmaps.shape() else {
        return Err(Error::dim("decode_keypoints", format!("heatmaps {:?} are not N×h×w", heatmaps.shape())));
    };
    if offsets.shape() != [n, h, w, 2] {
        return Err(Error::dim(
            "decode_keypoints",
            format!("offsets {:?} vs heatmaps {:?}", offsets.shape(), heatmaps.shape()),
        ));
    }
    let cells = h * w;
    let mut out = Vec::with_capacity(2 * n);
    for i in 0..n {
        let map = &heatmaps.data()[i * cells..(i + 1) * cells];
        let mut best = 0;
        for (p, &v) in map.iter().enumerate().skip(1) {
            if v > map[best] {
                best = p;
            }
        }
        let (py, px) = (best / w, best % w);
        let off = &offsets.data()[(i * cells + best) * 2..(i * cells + best) * 2 + 2];
        out.push(((px as f64 + 0.5 + off[0]) / w as f64).clamp(0.0, 1.0));
        out.push(((py as f64 + 0.5 + off[1]) / h as f64).clamp(0.0, 1.0));
    }
    Tensor::new(vec![n, 2], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_peak_decodes_to_cell_centre() {
        let mut maps = Tensor::zeros(vec![1, 4, 4]).into_data();
        maps[2 * 4 + 1] = 5.0;
        let maps = Tensor::new(vec![1, 4, 4], maps).unwrap();
        let offsets = Tensor::zeros(vec![1, 4, 4, 2]);
        let kp = decode_keypoints(&maps, &offsets).unwrap();
        assert_eq!(kp.data(), &[1.5 / 4.0, 2.5 / 4.0]);
    }

    #[test]
    fn uniform_map_picks_first_cell() {
        let maps = Tensor::full(vec![2, 3, 3], 0.7);
        let kp = decode_keypoints(&maps, &Tensor::zeros(vec![2, 3, 3, 2])).unwrap();
        assert_eq!(kp.row(0), &[0.5 / 3.0, 0.5 / 3.0]);
        assert_eq!(kp.row(1), &[0.5 / 3.0, 0.5 / 3.0]);
    }

    #[test]
    fn offsets_reach_target_within_radius() {
        let loc = Tensor::from_rows(&[&[0.3, 0.8]]).unwrap();
        let off = offsets_toward(&loc, 4, 4, 10.0).unwrap();
        let mut maps = Tensor::zeros(vec![1, 4, 4]).into_data();
        maps[5] = 1.0;
        let maps = Tensor::new(vec![1, 4, 4], maps).unwrap();
        let kp = decode_keypoints(&maps, &off).unwrap();
        assert!((kp.get(0, 0) - 0.3).abs() < 1e-15);
        assert!((kp.get(0, 1) - 0.8).abs() < 1e-15);

        let clamped = offsets_toward(&loc, 4, 4, 0.25).unwrap();
        assert!(clamped.data().iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn result_is_clamped_and_shapes_checked() {
        let maps = Tensor::zeros(vec![1, 2, 2]);
        let off = Tensor::full(vec![1, 2, 2, 2], -3.0);
        assert_eq!(decode_keypoints(&maps, &off).unwrap().data(), &[0.0, 0.0]);
        assert!(decode_keypoints(&maps, &Tensor::zeros(vec![1, 2, 2])).is_err());
        assert!(decode_keypoints(&Tensor::zeros(vec![4, 4]), &off).is_err());
    }
}
