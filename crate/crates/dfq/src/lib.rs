//! Data-free network quantization on the CPU.
//!
//! Trains a conditional generator against a frozen full-precision network
//! (batch-norm statistics matching, class guidance, attention-center
//! conditioning, paired adversarial diversity, train/eval consistency
//! penalties) and uses the synthetic samples to quantization-aware-train a
//! low-bit copy of the network. Everything is deterministic under a seed.

pub mod arch;
pub mod archive;
pub mod attention;
pub mod data;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod graph;
pub mod imageio;
pub mod losses;
pub mod metrics;
pub mod opt;
pub mod parallel;
pub mod pretrain;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::SeedStream;
pub use tensor::Tensor;
