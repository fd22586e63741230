//! Reverse-mode automatic differentiation over dense 64-bit real arrays.
//!
//! A [`Tape`] records the forward pass as a flat node list in topological
//! order; [`Tape::backward`] replays it in reverse. Everything is f64 and
//! single-threaded per tape; independent tapes may run on separate threads.

mod check;
pub mod fft;
mod tape;

pub use check::{check_gradient, check_gradient_multi, ScalarFn};
pub use tape::{DiffValue, Gradients, Tape};
