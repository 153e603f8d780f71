//! Block-wise architecture search and distillation for small diffusion U-Nets.
//!
//! The crate is organized around five pieces:
//!
//! - [`tensor`]: a dense f32 tensor engine with a reverse-mode tape and an
//!   Adam optimizer, just enough to express small convolutional U-Nets.
//! - [`diffusion`]: linear-beta noise schedules, the forward noising process,
//!   the noise-prediction training loss, and DDIM/ancestral samplers.
//! - [`unet`]: a block-structured U-Net, the weight-sharing supernet over
//!   per-layer kernel-size choices, teacher feature capture, and block-wise
//!   distillation training.
//! - [`search`]: the MACs cost model, exhaustive per-block constrained search,
//!   and the global evolutionary baseline used for comparison.
//! - [`retrain`]: from-scratch retraining of a searched subnet under the
//!   dynamic joint loss that blends block distillation with noise prediction.
//!
//! Checkpoint persistence lives in [`checkpoint`]; deterministic seeded RNG
//! streams in [`rng`].

pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod retrain;
pub mod rng;
pub mod search;
pub mod tensor;
pub mod unet;

pub use error::{CoreError, Result};
