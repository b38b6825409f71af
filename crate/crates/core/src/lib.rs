pub mod dsfr;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod hcmi;
pub mod image;
pub mod params;
pub mod pipeline;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::{Graph, Tensor, Var};
