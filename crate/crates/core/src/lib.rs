//! Transform-domain segmentation networks built on a small dense-tensor
//! kernel layer with hand-derived gradients.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod network;
pub mod ops;
pub mod optim;
pub mod perceptron;
pub mod pipeline;
pub mod preprocess;
pub mod tensor;
pub mod transforms;

pub use error::{Error, Result};
pub use network::{ModelParams, NetworkConfig};
pub use tensor::Tensor;
