//! Desk-scale laboratory for progressive low-rank compression of neural
//! networks during fine-tuning, plus an analytic parameter/FLOP accounting
//! engine for transformer architectures.
//!
//! Everything runs in double precision on a deterministic, single-threaded
//! tape: identical seeds and inputs give bit-identical values, gradients,
//! and optimizer trajectories.

pub mod accounting;
pub mod checkpoint;
pub mod decay;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod lora;
pub mod loss;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod zoo;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;
