pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gt;
pub mod imageio;
pub mod loss;
pub mod map;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod uncertainty;

pub use error::{Error, Result};
pub use map::SaliencyMap;
pub use model::{build_model, forward, ContextAttributes, ModelConfig, NetworkParams};
pub use tensor::Tensor;
