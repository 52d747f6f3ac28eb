//! Dual-branch class-activation-map learning at desk scale.
//!
//! A small residual CNN and a small vision transformer are trained jointly
//! on image-level labels. Their class activation maps are tied by an L1
//! consistency term, the transformer sees its input through an overlapping
//! cut-and-merge tiler, and its encoder is re-applied to its own summed
//! output a configurable number of times. At inference only the
//! transformer is used, with its CAMs refined by class-token attention.

pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod cnn;
pub mod data;
pub mod error;
pub mod eval;
mod kernels;
pub mod loss;
pub mod metrics;
pub mod params;
pub mod preprocess;
pub mod rng;
pub mod tensor;
pub mod tiler;
pub mod train;
pub mod vit;
pub mod viz;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
