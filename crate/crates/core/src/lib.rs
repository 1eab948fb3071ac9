//! Solvers and simulators for symmetric stochastic dynamic games of `n`
//! identical players coupled through the empirical distribution of their
//! states (the *deep state*).
//!
//! The crate covers two information structures:
//!
//! - **deep-state sharing**: every player sees its own state and the deep
//!   state; [`dss`] computes the stage-wise equilibrium by backward
//!   induction over the exact count lattice, with a best-response fixed
//!   point at every `(stage, deep state)` node, plus discounted value
//!   iteration and an exploitability audit;
//! - **no-sharing**: players see only their own state; [`smfe`] computes
//!   the infinite-population equilibrium on a quantized probability
//!   simplex and emits the deterministic mean-field trajectory and the
//!   per-stage laws every player can follow without communication.
//!
//! [`dynamics`] holds the exact probability engine both solvers share
//! (binomial/multinomial convolution kernels over integer counts),
//! [`bounds`] evaluates the model constants and performance-gap bounds,
//! and [`sim`] runs reproducible Monte Carlo population experiments.

pub mod bounds;
pub mod dss;
pub mod dynamics;
mod error;
pub mod model;
pub mod sim;
pub mod smfe;

pub use error::{Error, Result};
