//! Music auto-tagging networks on a small `f64` autodiff core.
//!
//! The crate provides the four tagging architectures (`k1c2`, `k2c1`, `k2c2`
//! and `crnn`), a width scaler that fits each one to a parameter budget, the
//! log-mel audio frontend, dataset handling with a synthetic corpus
//! generator, training with ADAM and early stopping, AUC-based evaluation,
//! and a training-throughput benchmark.

pub mod alloc;
pub mod arch;
pub mod audio;
pub mod bench;
pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod nn;
pub mod tensor;
pub mod train;

#[cfg(test)]
pub(crate) mod test_support;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

/// Seeded generator used for every stochastic step (initialization,
/// dropout, shuffling, synthetic data) so runs replay bit-for-bit.
pub type SeededRng = rand_chacha::ChaCha8Rng;
