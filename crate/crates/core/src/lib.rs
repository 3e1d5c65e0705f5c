//! Lightweight polarized multi-scale self-attention segmentation networks,
//! with the tensor algebra, losses, metrics and cost accounting they need.

pub mod conv;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pmfs;
pub mod preprocess;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod volume;

pub use conv::{ConvSpec, Precision};
pub use error::{Error, Result};
pub use graph::{Graph, Gradients, Interp, Var};
pub use tensor::Tensor;
