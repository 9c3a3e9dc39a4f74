//! Dropout expressed as explicit, deterministic, additive regularizers for
//! Transformer encoders.
//!
//! The crate is `no_std` (it needs `alloc`). It contains:
//!
//! - [`matrix`]: dense row-major `f64` matrices.
//! - [`graph`]: a tape-based reverse-mode autodiff graph over whole matrices.
//! - [`encoder`]: a small Transformer encoder with implicit (stochastic)
//!   dropout placements used as baselines.
//! - [`reg`]: closed-form dropout regularizers for queries, keys, values,
//!   attention-conditioned values and feed-forward weights, the feature-wise
//!   prior regularizer, and the decomposition relating the two.
//! - [`oracle`]: Bernoulli-mask Monte Carlo estimates of the quantities the
//!   closed forms claim to equal in expectation.
//! - [`optim`]: SGD and Adam.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod math;
pub mod matrix;
pub mod optim;
pub mod oracle;
pub mod reg;
pub mod rng;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use matrix::Matrix;
