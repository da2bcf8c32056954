//! Exact dynamic programming, Sub-Trajectory Balance training and
//! training-free policy mixing for GFlowNets on finite DAGs.
//!
//! The crate is `no_std` (with `alloc`). Everything here is a pure function of
//! its inputs; file formats, the command line and any IO live in the `flowmix`
//! companion crate.
//!
//! Module map:
//!
//! - [`dag`]: environments, policies, reaching probabilities, terminal
//!   distributions, brute-force enumeration and ancestral sampling.
//! - [`grid`]: the 2D grid environment, reward fields and K-hot features.
//! - [`flows`]: closed-form flow models for a reward under a uniform backward
//!   policy, packaged as [`flows::ComponentModel`]s.
//! - [`train`]: MLP heads, SubTB loss with manual backprop, Adam, replay and
//!   the training loop.
//! - [`compose`]: composition operators and the mixing policy.
//! - [`analysis`]: L1 error, distortion profiles, the L1 decomposition and
//!   preference sweeps.
#![cfg_attr(not(test), no_std)]
// `!(x > 0.0)` is the NaN-rejecting form.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod analysis;
pub mod compose;
pub mod dag;
mod error;
pub mod flows;
pub mod grid;
mod math;
pub mod train;

pub use error::{Error, Result};
