pub mod backbone;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod head;
pub mod metrics;
pub mod prototype;
pub mod rng;
pub mod scoring;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId, ParamId, Primitive};
pub use tensor::{Scalar, Tensor};
