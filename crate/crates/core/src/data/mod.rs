//! File formats, dataset loading and the synthetic scene generator.

mod loader;
mod manifest;
pub mod synth;
pub mod tensor_file;

pub use loader::{load_batches, Batch, Dataset, Pass};
pub use manifest::{ChannelRole, Manifest, SampleEntry, Split, MANIFEST_VERSION};
pub use synth::{generate_synthetic, SynthConfig};
pub use tensor_file::{read_tensor, write_tensor};

use crate::tensor::Tensor;

/// One input stack and its next-day target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `C×N×N`.
    pub input: Tensor,
    /// `1×N×N`.
    pub target: Tensor,
}
