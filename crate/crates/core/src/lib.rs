//! Unsupervised continual learning for amortized Bayesian inference.
//!
//! A conditional normalizing flow `q(θ | h(x))` is pre-trained on
//! simulations and then adapted to a stream of unlabeled tasks with a
//! self-consistency loss, optionally combined with episodic replay and an
//! elastic-weight-consolidation penalty.

pub mod continual;
pub mod error;
pub mod harness;
pub mod io;
pub mod losses;
pub mod models;
pub mod networks;
pub mod reference;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
