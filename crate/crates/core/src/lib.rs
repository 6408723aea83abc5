//! Gradient inversion under the single-round averaged-gradient threat model.
//!
//! An honest-but-curious server sees one batch-mean gradient from a client
//! and optimizes a dummy batch whose gradient matches it. This crate houses
//! the pieces end to end: a second-order-capable autodiff graph, victim
//! network definitions and the averaged-gradient oracle, the MAGIA and DLG
//! objectives, L-BFGS/Adam solvers, the attack loops, reconstruction
//! metrics, dataset/image I/O, and a brute-force verifier for the
//! combinatorial rescaling bound.

pub mod attack;
pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod tensor;
pub mod verify;
pub mod victim;

pub use error::{Error, Result};
pub use tensor::Tensor;
