//! Operator-splitting weak-approximation schemes for stochastic (partial)
//! differential equations, with an experiment harness that verifies the
//! schemes' convergence orders in ψ-weighted supremum norms over grids of
//! initial states.
//!
//! The library splits the dynamics `dx = (A x + α(x)) dt + Σ σ_j(x) dW^j`
//! into a deterministic substep (the semigroup of `A` plus the
//! Stratonovich-corrected drift) and diffusion substeps (flows of the `σ_j`
//! at Gaussian random times), and composes them into one-step schemes:
//! the Euler splitting (weak order 1) and the Ninomiya-Victoir splitting
//! (weak order 2, the optimum for positive-coefficient splittings).
//!
//! Crate layout:
//! - [`weighted_space`]: admissible weights ψ, sublevel sets, weighted norms
//! - [`models`]: split models, built-ins, exact moment oracles
//! - [`flows`]: substep propagators (moving-frame RK4, signed-time flows)
//! - [`splitting`]: scheme composition, path simulation, affine propagation
//! - [`montecarlo`]: estimators, weak errors, order fits, moment checks
//! - [`hjm`]: forward-curve dynamics as a split model
//! - [`config`] / [`harness`]: experiment configs and the CLI commands

pub mod config;
pub mod error;
pub mod flows;
pub mod harness;
pub mod hjm;
pub mod models;
pub mod montecarlo;
pub mod selftest;
pub mod splitting;
pub mod weighted_space;

pub use error::{Error, Result};
