pub mod ablation;
pub mod backbone;
pub mod config;
pub mod data;
pub mod ddr;
pub mod decoder;
pub mod dmse;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod heatmap;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::{Scalar, Tensor};
