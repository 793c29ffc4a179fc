//! Isostables, isochrons, and Koopman-eigenfunction coordinates for ODE
//! systems with a hyperbolic fixed point.
//!
//! The slowest Koopman eigenfunction `s1` of a system with a stable fixed
//! point encodes how trajectories approach the equilibrium: the level sets
//! of `|s1|` are the isostables (sets of initial conditions that converge
//! synchronously), and for a spiral sink the level sets of the argument of
//! `s1` are the isochrons. This crate evaluates `s1` pointwise from Laplace
//! averages along numerically integrated trajectories, and layers grid
//! evaluation, contour extraction, action-angle / linearizing coordinates,
//! and Lyapunov-style diagnostics on top.
//!
//! Pipeline: [`dynamics`] defines vector fields and locates fixed points,
//! [`spectrum`] computes the Jacobian eigenstructure, [`flow`] integrates
//! trajectories, [`laplace`] evaluates the eigenfunction at a point, and
//! [`field`] maps it over grids and extracts level sets. The `isostable`
//! binary exposes the same pipeline as CLI subcommands driven by JSON
//! configs (see [`config`]).

pub mod config;
pub mod dynamics;
pub mod field;
pub mod flow;
pub mod laplace;
pub mod spectrum;
pub mod validate;

pub use config::RunConfig;
pub use dynamics::{FixedPoint, ModelConfig, VectorFieldModel};
pub use field::{ContourSet, GridSpec, LinearizedCoordinates, Quantity, ScalarField};
pub use flow::{Direction, IntegrationOptions, Trajectory};
pub use laplace::{EigenfunctionValue, EvalStatus, LaplaceOptions, Observable};
pub use spectrum::{LeadingClass, Spectrum, Stability};
