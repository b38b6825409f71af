//! The matching frame around the refinement blocks: toy backbone, token
//! encoder, similarity proposals, graph decoder and keypoint decoding.

pub mod backbone;
pub mod decoder;
pub mod encoder;
pub mod heads;
pub mod model;

pub use backbone::{backbone_features, FeatureMap};
pub use decoder::{graph_decoder, DecoderOutput, Skeleton};
pub use encoder::{encoder_refine, positional_encoding};
pub use heads::{decode_keypoints, offsets_toward, proposal_heatmaps};
pub use model::{forward, init_params, ForwardPass, ModelConfig, ModelInput};
