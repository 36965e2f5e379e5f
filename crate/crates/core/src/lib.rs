//! Oscillatory wave-grid state system.
//!
//! Each layer carries a scalar pressure-like field `p` and a two-component
//! velocity-like field `o = (ox, oy)` on an `H x W` grid. One time step is a
//! semi-implicit update built from a backward-difference gradient and a
//! forward-difference divergence, followed by implicit damping.
//!
//! The numeric core (`grid`, `spectral`, `scan`) is generic over the scalar
//! type; the learning stack (`model`, `train`, `experiments`) uses `f64`.

pub mod checkpoint;
pub mod error;
pub mod experiments;
pub mod fft2;
pub mod grid;
pub mod linalg;
pub mod model;
pub mod real;
pub mod rng;
pub mod scan;
pub mod spectral;
pub mod train;

pub use error::{Error, Result};
pub use real::Real;

/// Double-precision aliases used by the learning stack and the CLI.
pub type Field64 = grid::Field<f64>;
pub type GridShape64 = grid::GridShape<f64>;
pub type GridState64 = grid::GridState<f64>;
pub type PhysicalParams64 = grid::PhysicalParams<f64>;
pub type DiagonalizedSystem64 = scan::DiagonalizedSystem<f64>;

/// Single-precision aliases for the generic numeric core.
pub type Field32 = grid::Field<f32>;
pub type GridShape32 = grid::GridShape<f32>;
pub type GridState32 = grid::GridState<f32>;
pub type PhysicalParams32 = grid::PhysicalParams<f32>;
