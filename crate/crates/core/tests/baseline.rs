use capenext::harness::{chance_pck, evaluate, pck, synth_dataset, BBox, EvalSet, ExperimentConfig};
use capenext::pipeline::init_params;
use capenext::Tensor;

const TAUS: [f64; 4] = [0.05, 0.1, 0.2, 0.3];

fn mean_pck(pairs: &[(Tensor, BBox)], guess: impl Fn(&Tensor) -> Tensor, tau: f64) -> f64 {
    pairs.iter().map(|(gt, b)| pck(&guess(gt), gt, b, tau).unwrap()).sum::<f64>() / pairs.len() as f64
}

/// A freshly initialized model predicts near the image centre, so it should
/// land between uniform chance and a constant centre guess, far from a
/// trained model.
#[test]
fn untrained_model_scores_like_a_centre_guess() {
    let config = ExperimentConfig::default();
    let ds = synth_dataset(3, 14, 2).unwrap();
    let store = init_params(&config.model, config.seed).unwrap();
    let set = EvalSet::new(ds.samples.clone(), &config.model).unwrap();
    let eval = evaluate(&store, &config.model, &config.loss(), &set, &TAUS, "untrained", "all").unwrap();
    let pairs: Vec<_> = ds
        .samples
        .iter()
        .map(|s| {
            let rows: Vec<&[f64]> = s.keypoints.iter().map(|k| &k[..]).collect();
            (Tensor::from_rows(&rows).unwrap(), s.bbox)
        })
        .collect();
    for (i, &tau) in TAUS.iter().enumerate() {
        let chance = chance_pck(&pairs, tau, 200, 5).unwrap();
        let centre = mean_pck(&pairs, |gt| Tensor::full(gt.shape().to_vec(), 0.5), tau);
        let got = eval.row.pck[i];
        assert!(got <= centre.max(chance) + 0.05, "tau {tau}: untrained {got} vs centre {centre}, chance {chance}");
        assert!(got < 0.25, "tau {tau}: untrained {got}");
    }
}
