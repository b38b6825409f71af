//! Finite-difference checks for every differentiable block at small sizes.
//!
//! Each block's output is contracted with a fixed random probe to a scalar;
//! block inputs that are not weights are stored as parameters so their
//! gradients are checked too.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::synth_dataset;
use super::eval::prepare;
use crate::dsfr::{self, cross_attention, dsfr_forward, gate_scores, AblationFlags, DsfrConfig};
use crate::error::{Error, Result};
use crate::hcmi::{self, hcmi_forward, self_attention};
use crate::params::{Attention, Linear, ParamStore};
use crate::pipeline::{self, backbone_features, encoder_refine, graph_decoder, init_params, FeatureMap, ModelConfig, Skeleton};
use crate::tensor::{grad_check, GradReport, Graph, Tensor, Var};
use crate::training::{gaussian_target, heatmap_loss, offset_loss, sample_objective, HeatmapNorm, LossConfig};

pub const GRADCHECK_MODULES: [&str; 11] = [
    "self-attention",
    "hcmi",
    "cross-attention",
    "gates",
    "dsfr",
    "backbone",
    "encoder",
    "decoder",
    "heatmap-loss",
    "offset-loss",
    "model",
];

const DIM: usize = 8;
const SEED: u64 = 0x6C4E_C4EC;

fn probe_sum(g: &mut Graph, out: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let w = g.constant(Tensor::randn(shape, 1.0, rng))?;
    let prod = g.hadamard(out, w)?;
    g.sum(prod)
}

/// Checks the probe-weighted sum of `f`'s outputs; probes are reseeded per call.
fn check<F>(store: &ParamStore, tol: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Vec<Var>>,
{
    grad_check(
        |g, p| {
            let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0xFF);
            let outs = f(g, p)?;
            let mut total = probe_sum(g, outs[0], &mut rng)?;
            for &out in &outs[1..] {
                let s = probe_sum(g, out, &mut rng)?;
                total = g.add(total, s)?;
            }
            Ok(total)
        },
        store,
        tol,
    )
}

fn randn(store: &mut ParamStore, key: &str, shape: Vec<usize>, rng: &mut ChaCha8Rng) {
    store.insert(key, Tensor::randn(shape, 1.0, rng));
}

/// Replaces all-zero weight matrices with random ones so no gradient path is
/// masked by a zero-initialized head.
fn randomize_zero_weights(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let zero: Vec<String> = store
        .iter()
        .filter(|(n, t)| n.ends_with(".w") && t.data().iter().all(|&v| v == 0.0))
        .map(|(n, _)| n.to_owned())
        .collect();
    for name in zero {
        let shape = store.get(&name).expect("listed").shape().to_vec();
        store.insert(name, Tensor::randn(shape, 0.3, rng));
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        dim: DIM,
        tokens: 4,
        image_size: 64,
        patch: 16,
        encoder_layers: 1,
        decoder_layers: 2,
        zero_init_fusion: false,
        ..ModelConfig::default()
    }
}

/// Gradient check for one named block, at tolerance `tol`.
pub fn gradcheck_module(name: &str, tol: f64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut store = ParamStore::new();
    match name {
        "self-attention" => {
            Attention::init(&mut store, "attn", DIM, &mut rng);
            randn(&mut store, "x", vec![3, DIM], &mut rng);
            check(&store, tol, |g, p| {
                let attn = Attention::bind(p, g, "attn")?;
                let x = p.bind(g, "x")?;
                Ok(vec![self_attention(g, x, &attn, true)?])
            })
        }
        "hcmi" => {
            hcmi::init(&mut store, DIM, &mut rng);
            randn(&mut store, "img", vec![4, DIM], &mut rng);
            randn(&mut store, "cls", vec![1, DIM], &mut rng);
            check(&store, tol, |g, p| {
                let (i, c) = (p.bind(g, "img")?, p.bind(g, "cls")?);
                let (i, c) = hcmi_forward(g, p, i, c, true)?;
                Ok(vec![i, c])
            })
        }
        "cross-attention" => {
            Attention::init(&mut store, "attn", DIM, &mut rng);
            randn(&mut store, "q", vec![3, DIM], &mut rng);
            randn(&mut store, "kv", vec![4, DIM], &mut rng);
            check(&store, tol, |g, p| {
                let attn = Attention::bind(p, g, "attn")?;
                let (q, kv) = (p.bind(g, "q")?, p.bind(g, "kv")?);
                Ok(vec![cross_attention(g, q, kv, &attn)?])
            })
        }
        "gates" => {
            Linear::init(&mut store, "gate", DIM, 1, &mut rng);
            randn(&mut store, "e", vec![3, DIM], &mut rng);
            check(&store, tol, |g, p| {
                let gate = Linear::bind(p, g, "gate")?;
                let e = p.bind(g, "e")?;
                Ok(vec![gate_scores(g, e, &gate)?])
            })
        }
        "dsfr" => {
            let mut reports = Vec::new();
            let variants = [
                AblationFlags::default(),
                AblationFlags { use_learnable_weights: false, ..AblationFlags::default() },
                AblationFlags { use_dsfr: false, ..AblationFlags::default() },
            ];
            for flags in variants {
                let mut store = ParamStore::new();
                dsfr::init(&mut store, DIM, flags, false, &mut rng);
                randn(&mut store, "joint", vec![3, DIM], &mut rng);
                randn(&mut store, "img", vec![4, DIM], &mut rng);
                randn(&mut store, "cls", vec![1, DIM], &mut rng);
                let config = DsfrConfig { flags, outer_residual: true };
                reports.push(check(&store, tol, |g, p| {
                    let (j, i, c) = (p.bind(g, "joint")?, p.bind(g, "img")?, p.bind(g, "cls")?);
                    Ok(vec![dsfr_forward(g, p, j, i, c, config)?.joint])
                })?);
            }
            Ok(merge(reports, tol))
        }
        "backbone" => {
            pipeline::backbone::init(&mut store, 16, DIM, &mut rng);
            let image = synth_dataset(1, 2, 1)?.samples.swap_remove(0).image;
            check(&store, tol, |g, p| Ok(vec![backbone_features(g, p, &image, 16)?.tokens]))
        }
        "encoder" => {
            pipeline::encoder::init(&mut store, DIM, 2, &mut rng);
            randn(&mut store, "tokens", vec![4, DIM], &mut rng);
            check(&store, tol, |g, p| {
                let feat = FeatureMap { tokens: p.bind(g, "tokens")?, h: 2, w: 2 };
                Ok(vec![encoder_refine(g, p, feat, 2)?.tokens])
            })
        }
        "decoder" => {
            pipeline::decoder::init(&mut store, DIM, 2, &mut rng);
            randomize_zero_weights(&mut store, &mut rng);
            randn(&mut store, "joints", vec![3, DIM], &mut rng);
            randn(&mut store, "tokens", vec![4, DIM], &mut rng);
            let skeleton = Skeleton::ring(3)?;
            check(&store, tol, |g, p| {
                let joints = p.bind(g, "joints")?;
                let feat = FeatureMap { tokens: p.bind(g, "tokens")?, h: 2, w: 2 };
                let out = graph_decoder(g, p, joints, feat, &skeleton, 2)?;
                let mut all = out.locations;
                all.push(out.nodes);
                Ok(all)
            })
        }
        "heatmap-loss" => {
            let coords = Tensor::from_rows(&[&[0.3, 0.6], &[0.8, 0.1]])?;
            let target = gaussian_target(&coords, 4, 4, 1.5)?;
            randn(&mut store, "logits", vec![2, 16], &mut rng);
            let mut reports = Vec::new();
            for norm in [HeatmapNorm::L2, HeatmapNorm::L1] {
                reports.push(grad_check(
                    |g, p| {
                        let logits = p.bind(g, "logits")?;
                        heatmap_loss(g, logits, &target, norm)
                    },
                    &store,
                    tol,
                )?);
            }
            Ok(merge(reports, tol))
        }
        "offset-loss" => {
            let target = Tensor::from_rows(&[&[0.3, 0.6], &[0.8, 0.1], &[0.5, 0.5]])?;
            randn(&mut store, "p0", vec![3, 2], &mut rng);
            randn(&mut store, "p1", vec![3, 2], &mut rng);
            grad_check(
                |g, p| {
                    let layers = [p.bind(g, "p0")?, p.bind(g, "p1")?];
                    offset_loss(g, &layers, &target)
                },
                &store,
                tol,
            )
        }
        "model" => {
            let model = small_model();
            let mut store = init_params(&model, SEED)?;
            randomize_zero_weights(&mut store, &mut rng);
            // Scene whose ReLU pre-activations all sit farther than the
            // difference step from zero; central differences straddling a
            // kink disagree with the one-sided analytic slope.
            let scene = synth_dataset(2, 2, 1)?.samples.swap_remove(0);
            let sample = prepare(&scene, &model)?;
            let loss = LossConfig::default();
            grad_check(|g, p| Ok(sample_objective(g, p, &model, &loss, &sample)?.total), &store, tol)
        }
        other => Err(Error::Input(format!(
            "unknown gradcheck module `{other}`; expected one of {}",
            GRADCHECK_MODULES.join(", ")
        ))),
    }
}

fn merge(reports: Vec<GradReport>, tol: f64) -> GradReport {
    let mut out = GradReport { params: Default::default(), tolerance: tol, passed: true };
    for (i, r) in reports.into_iter().enumerate() {
        out.passed &= r.passed;
        for (name, check) in r.params {
            out.params.insert(format!("{i}:{name}"), check);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_module() {
        assert!(matches!(gradcheck_module("nope", 1e-5), Err(Error::Input(_))));
    }

    #[test]
    fn blocks_pass() {
        for name in GRADCHECK_MODULES {
            let r = gradcheck_module(name, 1e-5).unwrap();
            assert!(r.passed, "{name}: {:?}", r.worst());
        }
    }
}
