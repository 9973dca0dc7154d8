//! Vision Transformer fine-tuning toolkit.
//!
//! - [`tensor`]: dense row-major tensors and the numeric kernels.
//! - [`vit`]: configuration, named parameters and the forward pass.
//! - [`train`]: reverse-mode gradients, AdamW, freezing and the epoch loop.
//! - [`data`]: image decoding, augmentation, batching and k-fold splits.
//! - [`metrics`]: confusion matrices, classification metrics and ROC AUC.
//! - [`checkpoint`]: the `VITC` binary checkpoint format.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use rng::{derive_seed, Rng};
pub use tensor::{Scalar, Tensor};
pub use vit::{ModelParams, ViTConfig};
