//! Dual-stream feature refinement.
//!
//! The joint embedding queries the refined image tokens and the refined class
//! token through two independent cross-attentions, each followed by an MLP.
//! Per-joint sigmoid gates weight the two streams before a fusion MLP, and the
//! result is added back onto the joint embedding:
//!
//! ```text
//! e_img_j = MLP_img(CrossAttn(e_joint, e'_img))
//! e_cls_j = MLP_cls(CrossAttn(e_joint, e'_cls))
//! alpha   = sigmoid(e_img_j · w_a + b_a)        (N×1)
//! beta    = sigmoid(e_cls_j · w_b + b_b)        (N×1)
//! out     = e_joint + MLP_fuse(alpha ⊙ e_img_j + beta ⊙ e_cls_j + e_joint)
//! ```
//!
//! The fusion MLP's output layer starts at zero, so an untrained block is the
//! identity on `e_joint`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Attention, Linear, Mlp, ParamStore};
use crate::tensor::{Graph, Var};

pub const PREFIX: &str = "dsfr";
pub const BYPASS_PREFIX: &str = "bypass";
/// Shrinks the bypass projections when the fused path starts at the identity,
/// so both variants begin close to the unrefined joint embeddings.
pub const BYPASS_INIT_SCALE: f64 = 0.1;

/// Which sub-networks are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_hcmi: bool,
    /// When false, DSFR is replaced by two ReLU projections added to the joints.
    pub use_dsfr: bool,
    /// When false, the gates are the constant 1.
    pub use_learnable_weights: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_hcmi: true,
            use_dsfr: true,
            use_learnable_weights: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DsfrConfig {
    pub flags: AblationFlags,
    /// Add `e_joint` back outside the fusion MLP.
    pub outer_residual: bool,
}

impl Default for DsfrConfig {
    fn default() -> Self {
        DsfrConfig {
            flags: AblationFlags::default(),
            outer_residual: true,
        }
    }
}

pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, flags: AblationFlags, zero_init_fusion: bool, rng: &mut R) {
    if !flags.use_dsfr {
        for stream in ["img", "cls"] {
            let prefix = format!("{BYPASS_PREFIX}.{stream}");
            Linear::init(store, &prefix, dim, dim, rng);
            if zero_init_fusion {
                let w = store.get_mut(&format!("{prefix}.w")).expect("just inserted");
                *w = w.map(|v| v * BYPASS_INIT_SCALE);
            }
        }
        return;
    }
    for stream in ["img", "cls"] {
        Attention::init(store, &format!("{PREFIX}.attn_{stream}"), dim, rng);
        Mlp::init(store, &format!("{PREFIX}.mlp_{stream}"), (dim, 2 * dim, dim), false, rng);
        if flags.use_learnable_weights {
            Linear::init(store, &format!("{PREFIX}.gate_{stream}"), dim, 1, rng);
        }
    }
    Mlp::init(store, &format!("{PREFIX}.fuse"), (dim, 2 * dim, dim), zero_init_fusion, rng);
}

/// `N` queries attending over `M` key/value rows.
pub fn cross_attention(g: &mut Graph, queries: Var, keys_values: Var, attn: &Attention) -> Result<Var> {
    attn.forward(g, queries, keys_values)
}

/// `sigmoid(e·w + b)`, one score per row.
pub fn gate_scores(g: &mut Graph, e: Var, gate: &Linear) -> Result<Var> {
    let logits = gate.forward(g, e)?;
    if g.value(logits).cols() != 1 {
        return Err(Error::dim("gate_scores", "gate must emit one score per joint"));
    }
    g.sigmoid(logits)
}

pub struct DsfrOutput {
    pub joint: Var,
    pub alpha: Option<Var>,
    pub beta: Option<Var>,
}

pub fn dsfr_forward(
    g: &mut Graph,
    store: &ParamStore,
    e_joint: Var,
    e_img: Var,
    e_cls: Var,
    config: DsfrConfig,
) -> Result<DsfrOutput> {
    let c = g.value(e_joint).cols();
    for (what, v) in [("image", e_img), ("class", e_cls)] {
        if g.value(v).cols() != c {
            return Err(Error::dim(
                "dsfr_forward",
                format!("{what} width {} vs joint width {c}", g.value(v).cols()),
            ));
        }
    }
    let n = g.value(e_joint).rows();

    if !config.flags.use_dsfr {
        let img_proj = Linear::bind(store, g, &format!("{BYPASS_PREFIX}.img"))?;
        let cls_proj = Linear::bind(store, g, &format!("{BYPASS_PREFIX}.cls"))?;
        let pooled = g.mean_rows(e_img)?;
        let img = img_proj.forward(g, pooled)?;
        let img = g.relu(img)?;
        let img = g.broadcast_rows(img, n)?;
        let cls = cls_proj.forward(g, e_cls)?;
        let cls = g.relu(cls)?;
        let cls = g.broadcast_rows(cls, n)?;
        let sum = g.add(e_joint, img)?;
        return Ok(DsfrOutput {
            joint: g.add(sum, cls)?,
            alpha: None,
            beta: None,
        });
    }

    let mut streams = Vec::with_capacity(2);
    for (stream, kv) in [("img", e_img), ("cls", e_cls)] {
        let attn = Attention::bind(store, g, &format!("{PREFIX}.attn_{stream}"))?;
        let mlp = Mlp::bind(store, g, &format!("{PREFIX}.mlp_{stream}"))?;
        let ctx = cross_attention(g, e_joint, kv, &attn)?;
        streams.push(mlp.forward(g, ctx)?);
    }
    let (joint_img, joint_cls) = (streams[0], streams[1]);

    let (alpha, beta, weighted_img, weighted_cls) = if config.flags.use_learnable_weights {
        let gate_img = Linear::bind(store, g, &format!("{PREFIX}.gate_img"))?;
        let gate_cls = Linear::bind(store, g, &format!("{PREFIX}.gate_cls"))?;
        let alpha = gate_scores(g, joint_img, &gate_img)?;
        let beta = gate_scores(g, joint_cls, &gate_cls)?;
        let wi = g.hadamard(alpha, joint_img)?;
        let wc = g.hadamard(beta, joint_cls)?;
        (Some(alpha), Some(beta), wi, wc)
    } else {
        (None, None, joint_img, joint_cls)
    };

    let fused = g.add(weighted_img, weighted_cls)?;
    let fused = g.add(fused, e_joint)?;
    let fuse = Mlp::bind(store, g, &format!("{PREFIX}.fuse"))?;
    let refined = fuse.forward(g, fused)?;
    let joint = if config.outer_residual {
        g.add(e_joint, refined)?
    } else {
        refined
    };
    Ok(DsfrOutput { joint, alpha, beta })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::{grad_check, sigmoid, Tensor};

    fn store(seed: u64, dim: usize, flags: AblationFlags, zero_init: bool) -> (ParamStore, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        init(&mut s, dim, flags, zero_init, &mut rng);
        (s, rng)
    }

    fn run(s: &ParamStore, joint: &Tensor, img: &Tensor, cls: &Tensor, config: DsfrConfig) -> Tensor {
        let mut g = Graph::new();
        let j = g.constant(joint.clone()).unwrap();
        let i = g.constant(img.clone()).unwrap();
        let c = g.constant(cls.clone()).unwrap();
        let out = dsfr_forward(&mut g, s, j, i, c, config).unwrap();
        g.value(out.joint).clone()
    }

    #[test]
    fn identity_at_initialization() {
        let (s, mut rng) = store(0, 8, AblationFlags::default(), true);
        let joint = Tensor::randn(vec![5, 8], 1.0, &mut rng);
        let img = Tensor::randn(vec![4, 8], 1.0, &mut rng);
        let cls = Tensor::randn(vec![1, 8], 1.0, &mut rng);
        let out = run(&s, &joint, &img, &cls, DsfrConfig::default());
        assert_eq!(out.data(), joint.data());
    }

    #[test]
    fn zero_gate_params_give_half_scores_and_saturate_with_bias() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::full(vec![3, 4], 0.7)).unwrap();
        let mut s = ParamStore::new();
        Linear::init_zero(&mut s, "gate", 4, 1);
        let gate = Linear::bind(&s, &mut g, "gate").unwrap();
        let scores = gate_scores(&mut g, e, &gate).unwrap();
        assert_eq!(g.value(scores).data(), &[0.5, 0.5, 0.5]);

        s.insert("gate.b", Tensor::scalar(20.0));
        let mut g = Graph::new();
        let e = g.constant(Tensor::full(vec![2, 4], 0.7)).unwrap();
        let gate = Linear::bind(&s, &mut g, "gate").unwrap();
        let scores = gate_scores(&mut g, e, &gate).unwrap();
        assert!(g.value(scores).data().iter().all(|&v| v > 1.0 - 1e-8 && v < 1.0));
    }

    #[test]
    fn gate_scores_match_hand_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let w = Tensor::randn(vec![5, 1], 1.0, &mut rng);
        let b = Tensor::randn(vec![1, 1], 1.0, &mut rng);
        let mut s = ParamStore::new();
        s.insert("gate.w", w.clone());
        s.insert("gate.b", b.clone());
        let mut g = Graph::new();
        let ev = g.constant(e.clone()).unwrap();
        let gate = Linear::bind(&s, &mut g, "gate").unwrap();
        let scores = gate_scores(&mut g, ev, &gate).unwrap();
        for r in 0..3 {
            let z: f64 = (0..5).map(|k| e.get(r, k) * w.get(k, 0)).sum::<f64>() + b.data()[0];
            let expected = 1.0 / (1.0 + (-z).exp());
            assert!((g.value(scores).data()[r] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn single_key_attention_is_uniform_over_joints() {
        let (s, mut rng) = store(1, 6, AblationFlags::default(), true);
        let mut g = Graph::new();
        let attn = Attention::bind(&s, &mut g, "dsfr.attn_cls").unwrap();
        let q = g.constant(Tensor::randn(vec![3, 6], 1.0, &mut rng)).unwrap();
        let kv = g.constant(Tensor::randn(vec![1, 6], 1.0, &mut rng)).unwrap();
        let (_, w) = attn.forward_with_weights(&mut g, q, kv).unwrap();
        assert_eq!(g.value(w).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn identity_wiring_returns_kv_row() {
        let mut s = ParamStore::new();
        for n in ["wq", "wk", "wv", "wo"] {
            s.insert(format!("a.{n}"), Tensor::identity(3));
        }
        let mut g = Graph::new();
        let attn = Attention::bind(&s, &mut g, "a").unwrap();
        let q = g.constant(Tensor::from_rows(&[&[0.3, -1.0, 2.0]]).unwrap()).unwrap();
        let kv = g.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap()).unwrap();
        let out = cross_attention(&mut g, q, kv, &attn).unwrap();
        assert_eq!(g.value(out).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn fixed_weights_differ_from_gated_path() {
        let flags = AblationFlags::default();
        let (s, mut rng) = store(2, 6, flags, false);
        let joint = Tensor::randn(vec![3, 6], 1.0, &mut rng);
        let img = Tensor::randn(vec![4, 6], 1.0, &mut rng);
        let cls = Tensor::randn(vec![1, 6], 1.0, &mut rng);
        let gated = run(&s, &joint, &img, &cls, DsfrConfig::default());
        let fixed_cfg = DsfrConfig {
            flags: AblationFlags {
                use_learnable_weights: false,
                ..flags
            },
            outer_residual: true,
        };
        let fixed = run(&s, &joint, &img, &cls, fixed_cfg);
        assert!(gated.max_abs_diff(&fixed).unwrap() > 1e-6);
    }

    #[test]
    fn zero_gates_reduce_fusion_input_to_joint() {
        // Gate bias at -800 drives sigmoid to 0 in f64 (exp(-800) underflows).
        let (mut s, mut rng) = store(5, 4, AblationFlags::default(), false);
        s.insert("dsfr.gate_img.w", Tensor::zeros(vec![4, 1]));
        s.insert("dsfr.gate_cls.w", Tensor::zeros(vec![4, 1]));
        s.insert("dsfr.gate_img.b", Tensor::scalar(-800.0));
        s.insert("dsfr.gate_cls.b", Tensor::scalar(-800.0));
        assert_eq!(sigmoid(-800.0), 0.0);
        let joint = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let img = Tensor::randn(vec![2, 4], 1.0, &mut rng);
        let cls = Tensor::randn(vec![1, 4], 1.0, &mut rng);
        let out = run(&s, &joint, &img, &cls, DsfrConfig::default());

        let mut g = Graph::new();
        let j = g.constant(joint.clone()).unwrap();
        let fuse = Mlp::bind(&s, &mut g, "dsfr.fuse").unwrap();
        let r = fuse.forward(&mut g, j).unwrap();
        let expected = g.add(j, r).unwrap();
        assert_eq!(&out, g.value(expected));
    }

    #[test]
    fn bypass_path_matches_hand_composition() {
        let flags = AblationFlags {
            use_dsfr: false,
            ..AblationFlags::default()
        };
        let (s, mut rng) = store(3, 4, flags, true);
        assert!(s.names().all(|n| n.starts_with("bypass.")));
        let joint = Tensor::randn(vec![3, 4], 1.0, &mut rng);
        let img = Tensor::randn(vec![2, 4], 1.0, &mut rng);
        let cls = Tensor::randn(vec![1, 4], 1.0, &mut rng);
        let out = run(&s, &joint, &img, &cls, DsfrConfig { flags, outer_residual: true });

        let proj = |x: &[f64], prefix: &str| -> Vec<f64> {
            let w = s.get(&format!("{prefix}.w")).unwrap();
            let b = s.get(&format!("{prefix}.b")).unwrap();
            (0..4)
                .map(|j| {
                    let z: f64 = (0..4).map(|k| x[k] * w.get(k, j)).sum::<f64>() + b.data()[j];
                    z.max(0.0)
                })
                .collect()
        };
        let pooled: Vec<f64> = (0..4).map(|k| (img.get(0, k) + img.get(1, k)) / 2.0).collect();
        let pi = proj(&pooled, "bypass.img");
        let pc = proj(cls.data(), "bypass.cls");
        for r in 0..3 {
            for k in 0..4 {
                let expected = joint.get(r, k) + pi[k] + pc[k];
                assert!((out.get(r, k) - expected).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn joint_permutation_equivariance() {
        let (s, mut rng) = store(4, 6, AblationFlags::default(), false);
        let joint = Tensor::randn(vec![3, 6], 1.0, &mut rng);
        let img = Tensor::randn(vec![4, 6], 1.0, &mut rng);
        let cls = Tensor::randn(vec![1, 6], 1.0, &mut rng);
        let out = run(&s, &joint, &img, &cls, DsfrConfig::default());
        let perm = [2usize, 0, 1];
        let rows: Vec<&[f64]> = perm.iter().map(|&r| joint.row(r)).collect();
        let permuted = Tensor::from_rows(&rows).unwrap();
        let out_p = run(&s, &permuted, &img, &cls, DsfrConfig::default());
        for (i, &r) in perm.iter().enumerate() {
            for (a, b) in out_p.row(i).iter().zip(out.row(r)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn full_block_gradient_check() {
        for flags in [
            AblationFlags::default(),
            AblationFlags { use_learnable_weights: false, ..AblationFlags::default() },
            AblationFlags { use_dsfr: false, ..AblationFlags::default() },
        ] {
            let (s, mut rng) = store(6, 5, flags, false);
            let joint = Tensor::randn(vec![3, 5], 1.0, &mut rng);
            let img = Tensor::randn(vec![4, 5], 1.0, &mut rng);
            let cls = Tensor::randn(vec![1, 5], 1.0, &mut rng);
            let probe = Tensor::randn(vec![3, 5], 1.0, &mut rng);
            let config = DsfrConfig { flags, outer_residual: true };
            let report = grad_check(
                |g, p| {
                    let j = g.constant(joint.clone())?;
                    let i = g.constant(img.clone())?;
                    let c = g.constant(cls.clone())?;
                    let out = dsfr_forward(g, p, j, i, c, config)?;
                    let w = g.constant(probe.clone())?;
                    let prod = g.hadamard(out.joint, w)?;
                    g.sum(prod)
                },
                &s,
                1e-5,
            )
            .unwrap();
            assert!(report.passed, "{flags:?}: {:?}", report.worst());
        }
    }
}
