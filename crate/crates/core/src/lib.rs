//! Solver library for sup-envelope parabolic PDE problems
//!
//! ```text
//! du/dt + F(t, x, u, Du, D^2u) = 0,   u(T, .) = g,
//! F = sup over a finite family of semilinear generators (b, sigma, f)
//! ```
//!
//! The value is computed two independent ways: backward dynamic programming
//! over controlled forward-backward SDE values ([`dpp`]), and a monotone
//! explicit finite-difference scheme ([`fd`]) used as an oracle. Supporting
//! machinery: forward Euler-Maruyama simulation with counter-based
//! reproducible noise ([`sde`]), least-squares Monte Carlo BSDE solving
//! ([`bsde`]), structural validation of the problem datum ([`model`]) and a
//! batch experiment runner ([`experiment`]).

pub mod bsde;
pub mod checks;
pub mod config;
pub mod dpp;
pub mod error;
pub mod experiment;
pub mod fd;
pub mod field;
pub mod grid;
pub mod model;
pub mod quad;
pub mod report;
pub mod rng;
pub mod sde;

pub use error::{Error, Result};
