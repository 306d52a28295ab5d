pub mod autobit;
pub mod binfact;
pub mod calib;
pub mod error;
pub mod jointq;
pub mod layerwise;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod preprocess;
pub mod quant;
pub mod rng;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Matrix;
