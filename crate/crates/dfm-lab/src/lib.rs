//! A desk-scale laboratory for discrete flow matching over finite state
//! spaces `S = [M]^d`.
//!
//! The crate implements the full generative pipeline — mixture probability
//! paths, factorized velocities, transformer velocity estimators, CDFM
//! training, Euler sampling — alongside exact reference machinery
//! (Kolmogorov ODE solves, evolution operators, enumerated marginal
//! velocities) so that total-variation error bounds and identities can be
//! checked numerically.
//!
//! Module map:
//! - [`states`]: the lattice, its flat codec, and the integer embedding.
//! - [`ctmc`]: generators, RK4 Kolmogorov solves, evolution operators,
//!   Euler samplers, total variation, variation-of-constants residual.
//! - [`mixture`]: schedules, conditional/marginal paths and velocities.
//! - [`model`]: the per-coordinate transformer velocity estimator with
//!   exact reverse-mode gradients and norm/Lipschitz diagnostics.
//! - [`trainer`]: CDFM Monte Carlo training and exact risk evaluation.
//! - [`extension`]: the bump-function bridge from lattice velocities to
//!   continuous fields.
//! - [`harness`]: experiment orchestration, bound verification, sweeps,
//!   and report emission behind the CLI.

pub mod ctmc;
pub mod error;
pub mod extension;
pub mod harness;
pub mod mixture;
pub mod model;
pub mod seed;
pub mod states;
pub mod trainer;

pub use error::{Error, Result};
