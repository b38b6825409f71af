use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{self, backbone_features};
use super::decoder::{self, graph_decoder, Skeleton};
use super::encoder::{self, encoder_refine};
use super::heads::{decode_keypoints, offsets_toward, proposal_heatmaps};
use crate::dsfr::{self, dsfr_forward, AblationFlags, DsfrConfig};
use crate::encoders::{EmbeddingBundle, EncoderDims};
use crate::error::{Error, Result};
use crate::hcmi::{self, hcmi_forward};
use crate::image::Image;
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor, Var};

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width `C`.
    pub dim: usize,
    /// Image-embedding tokens `M` (a perfect square).
    pub tokens: usize,
    pub image_size: usize,
    pub patch: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub flags: AblationFlags,
    pub hcmi_residual: bool,
    pub outer_residual: bool,
    pub zero_init_fusion: bool,
    /// Largest offset correction, in grid cells, applied at the heatmap peak.
    pub offset_radius: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            tokens: 4,
            image_size: 64,
            patch: 8,
            encoder_layers: 2,
            decoder_layers: 3,
            flags: AblationFlags::default(),
            hcmi_residual: true,
            outer_residual: true,
            zero_init_fusion: true,
            offset_radius: 2.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let side = (self.tokens as f64).sqrt().round() as usize;
        let problems = [
            (self.dim == 0 || self.dim % 4 != 0, "dim must be a positive multiple of 4"),
            (self.patch == 0 || self.image_size % self.patch != 0, "image_size must be a multiple of patch"),
            (self.tokens == 0 || side * side != self.tokens, "tokens must be a perfect square"),
            (side == 0 || self.image_size % side.max(1) != 0, "image_size must split into the token grid"),
            (self.decoder_layers == 0, "decoder needs at least one layer"),
            (!(self.offset_radius >= 0.0), "offset_radius must be non-negative"),
        ];
        match problems.iter().find(|(bad, _)| *bad) {
            Some((_, msg)) => Err(Error::Config((*msg).into())),
            None => Ok(()),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        let side = self.image_size / self.patch;
        (side, side)
    }

    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            dim: self.dim,
            tokens: self.tokens,
        }
    }

    pub fn dsfr(&self) -> DsfrConfig {
        DsfrConfig {
            flags: self.flags,
            outer_residual: self.outer_residual,
        }
    }
}

/// Freshly initialized parameters for every active sub-network.
///
/// Each sub-network draws from its own stream of `seed`, so blocks shared by
/// two ablation variants start from identical weights.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let stream = |k: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k);
        rng
    };
    let mut store = ParamStore::new();
    backbone::init(&mut store, config.patch, config.dim, &mut stream(1));
    encoder::init(&mut store, config.dim, config.encoder_layers, &mut stream(2));
    if config.flags.use_hcmi {
        hcmi::init(&mut store, config.dim, &mut stream(3));
    }
    dsfr::init(&mut store, config.dim, config.flags, config.zero_init_fusion, &mut stream(4));
    decoder::init(&mut store, config.dim, config.decoder_layers, &mut stream(5));
    Ok(store)
}

pub struct ModelInput<'a> {
    pub image: &'a Image,
    pub bundle: &'a EmbeddingBundle,
    pub skeleton: &'a Skeleton,
}

/// Handles into the graph built by [`forward`].
pub struct ForwardPass {
    /// Proposal logits, `N × (h·w)`.
    pub heatmaps: Var,
    /// Per decoder layer, `N×2`.
    pub locations: Vec<Var>,
    pub refined_joints: Var,
    pub alpha: Option<Var>,
    pub beta: Option<Var>,
    pub h: usize,
    pub w: usize,
}

/// Backbone → encoder → HCMI → DSFR → proposals → graph decoder.
pub fn forward(g: &mut Graph, store: &ParamStore, config: &ModelConfig, input: &ModelInput<'_>) -> Result<ForwardPass> {
    let bundle = input.bundle;
    if bundle.e_joint.cols() != config.dim {
        return Err(Error::Config(format!(
            "embedding width {} does not match model width {}",
            bundle.e_joint.cols(),
            config.dim
        )));
    }
    let feat = backbone_features(g, store, input.image, config.patch)?;
    let feat = encoder_refine(g, store, feat, config.encoder_layers)?;

    let e_joint = g.constant(bundle.e_joint.clone())?;
    let e_img = g.constant(bundle.e_img.clone())?;
    let e_cls = g.constant(bundle.e_cls.clone())?;
    let (img, cls) = if config.flags.use_hcmi {
        hcmi_forward(g, store, e_img, e_cls, config.hcmi_residual)?
    } else {
        (e_img, e_cls)
    };
    let refined = dsfr_forward(g, store, e_joint, img, cls, config.dsfr())?;

    let heatmaps = proposal_heatmaps(g, feat, refined.joint)?;
    let dec = graph_decoder(g, store, refined.joint, feat, input.skeleton, config.decoder_layers)?;
    Ok(ForwardPass {
        heatmaps,
        locations: dec.locations,
        refined_joints: refined.joint,
        alpha: refined.alpha,
        beta: refined.beta,
        h: feat.h,
        w: feat.w,
    })
}

impl ForwardPass {
    /// Final coordinates: proposal peak plus the decoder's offset correction.
    pub fn keypoints(&self, g: &Graph, offset_radius: f64) -> Result<Tensor> {
        let n = g.value(self.heatmaps).rows();
        let maps = g.value(self.heatmaps).reshape(vec![n, self.h, self.w])?;
        let last = *self.locations.last().expect("decoder has at least one layer");
        let offsets = offsets_toward(g.value(last), self.h, self.w, offset_radius)?;
        decode_keypoints(&maps, &offsets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = [
            ModelConfig { dim: 10, ..Default::default() },
            ModelConfig { patch: 7, ..Default::default() },
            ModelConfig { tokens: 3, ..Default::default() },
            ModelConfig { decoder_layers: 0, ..Default::default() },
            ModelConfig { offset_radius: f64::NAN, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Config(_))), "{c:?}");
        }
    }

    #[test]
    fn ablations_select_parameter_sets() {
        let names = |flags| {
            let cfg = ModelConfig { dim: 8, flags, ..Default::default() };
            init_params(&cfg, 0).unwrap().names().map(str::to_owned).collect::<Vec<_>>()
        };
        let full = names(AblationFlags::default());
        assert!(full.iter().any(|n| n.starts_with("hcmi.")));
        assert!(full.iter().any(|n| n.starts_with("dsfr.gate_img")));
        assert!(!full.iter().any(|n| n.starts_with("bypass.")));

        let no_hcmi = names(AblationFlags { use_hcmi: false, ..Default::default() });
        assert!(!no_hcmi.iter().any(|n| n.starts_with("hcmi.")));

        let no_lw = names(AblationFlags { use_learnable_weights: false, ..Default::default() });
        assert!(!no_lw.iter().any(|n| n.contains("gate")));
        assert!(no_lw.iter().any(|n| n.starts_with("dsfr.fuse")));

        let no_dsfr = names(AblationFlags { use_dsfr: false, ..Default::default() });
        assert!(!no_dsfr.iter().any(|n| n.starts_with("dsfr.")));
        assert!(no_dsfr.iter().any(|n| n.starts_with("bypass.img")));
    }
}
