pub mod ablation;
pub mod backbone;
pub mod datakit;
pub mod error;
pub mod grid;
pub mod masking;
pub mod rng;
pub mod sampler;
pub mod toylang;
pub mod trainer;

pub use error::{Error, Result};
pub use maskgrid_tensor::Scalar;
