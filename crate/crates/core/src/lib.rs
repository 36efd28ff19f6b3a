//! Best constants and extremal functions of critical anisotropic Sobolev
//! embeddings where some directions carry exponent one.
//!
//! The limit problem is approximated by a family of uniformly convex
//! problems indexed by `eps`, each solved on a truncated box by projected
//! gradient descent and driven to `eps -> 0` by continuation.

pub mod error;
pub mod exponents;
pub mod grid;
pub mod functional;
pub mod solver;
pub mod continuation;
pub mod verify;
pub mod config;
pub mod cli;

pub use error::{Error, Result};
pub use exponents::{
    derive_exponents, epsilon_exponents, epsilon_schedule, EpsilonExponents, ExponentVector,
    LevelExponents,
};
pub use grid::{
    backward_div, forward_diff, grad1_mag, integrate, interpolate, lp_norm, make_grid, Field, Grid,
};
pub use functional::{
    constraint_norm, energy, energy_density, energy_gradient, limit_energy, troisi_ratios, EnergyBreakdown,
    Evaluator,
};
pub use solver::{
    default_init, el_residual, el_residual_with_margin, minimize, multiplier, ExtremalResult,
    ExtremalSummary, SolverOptions,
};
