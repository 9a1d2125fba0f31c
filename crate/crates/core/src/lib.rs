//! Trust-region policy optimization with an exact tabular track and a
//! sampled stochastic track.
//!
//! The crate is organized around two drivers that share their numerical
//! kernels:
//!
//! * [`tabular`] runs the deterministic trust-region loop on finite MDPs
//!   with the total-variation subproblem solved exactly, so every
//!   improvement bound can be checked mechanically against the exact
//!   quantities from [`mdp`].
//! * [`driver`] runs the full stochastic algorithm (natural-gradient inner
//!   solver, GAE advantages, std-augmented acceptance ratio, adaptive
//!   radius) on the built-in toy environments from [`envs`].

pub mod driver;
pub mod envs;
pub mod error;
pub mod mdp;
pub mod numerics;
pub mod policy;
pub mod sampler;
pub mod tabular;

pub use error::{Error, Result};
