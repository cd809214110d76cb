//! Distributed compressed SGD and SignSGD simulators with first-order,
//! second-order and stability-corrected SDE surrogates, plus the tooling to
//! measure weak-approximation order, stability thresholds and convergence
//! bounds.

pub mod analysis;
pub mod clients;
pub mod compressors;
pub mod config;
pub mod error;
pub mod noise;
pub mod objectives;
pub mod optimizers;
pub mod quad;
pub mod repro;
pub mod rng;
pub mod schedulers;
pub mod sde;
pub mod trajectory;

pub use error::{Error, Result};
