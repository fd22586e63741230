//! Joint parameterized optimization (JPO) of batches of inverse problems.
//!
//! Trains a small neural network end-to-end through differentiable
//! simulators so that solution quality on the training problems beats
//! per-problem classical optimization, together with the statistical
//! machinery explaining why joint optimization suppresses landscape noise.

pub mod alignment;
pub mod autodiff;
pub mod error;
pub mod harness;
pub mod io;
pub mod methods;
pub mod net;
pub mod noise;
pub mod optim;
pub mod problems;
pub mod rng;

pub use error::{JpoError, Result};
