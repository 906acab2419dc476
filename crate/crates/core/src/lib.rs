//! Block-selective fine-tuning under synthetic distribution drift.
//!
//! A residual classifier is trained on a source task, the target domain is
//! shifted at the input, feature, or label level, and individual blocks are
//! fine-tuned while the rest of the network stays frozen. Every run is
//! costed in FLOPs, estimated time, and energy.

pub mod blocknet;
pub mod cost;
pub mod drift;
pub mod error;
pub mod finetune;
pub mod gradcheck;
pub mod harness;
pub mod tensor;

pub use blocknet::{ArchSpec, BlockId, BlockNet, BlockSelection};
pub use error::{Error, Result};
pub use tensor::Tensor2;
