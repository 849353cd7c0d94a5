//! Expected batch optimal transport between a standard Gaussian and a
//! discrete target: exact minibatch couplings, their rates, the flow-matching
//! velocity fields they induce, and the closed-form two-atom model.
//!
//! Atom indices and batch slots are zero-based.

pub mod assignment;
pub mod binary;
pub mod error;
pub mod flow;
pub mod measures;
pub mod plan;
pub mod quadrature;
pub mod rng;
pub mod semidiscrete;
pub mod special;
pub mod stats;
pub mod velocity;

pub use error::{Error, Result};
