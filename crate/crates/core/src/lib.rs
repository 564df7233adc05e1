//! Amalgamation of trained networks: several single- or multi-task source
//! networks are distilled, without labels, into one compact multi-task
//! network.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`]: f64 tensors with a tape-based reverse-mode autodiff and SGD.
//! - [`blocknet`]: a small residual convolutional network with per-task heads.
//! - [`bridge`]: learnable 1x1 alignments between teacher and student blocks.
//! - [`selector`]: entropy-based choice of the most confident teacher.
//! - [`engine`]: the amalgamation loop, the two-stage pipeline and evaluation.
//! - [`synthdata`]: seeded synthetic scenes with several binary labels.
//! - [`zoo`]: checksummed checkpoints and a registry of networks.
//! - [`experiment`]: the seeded desk experiments built from the above.
//! - [`cli`]: the command-line driver.

pub mod blocknet;
pub mod bridge;
pub mod cli;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod selector;
pub mod synthdata;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
