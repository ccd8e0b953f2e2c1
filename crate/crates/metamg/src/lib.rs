//! Structured-grid multigrid solvers where every operator is a convolution
//! stencil, extended with trainable smoothers and hypernetwork-generated
//! subspace-correction smoothers, plus a training engine and benchmark
//! harness.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod discretize;
pub mod error;
pub mod grid;
pub mod mgnet;
pub mod multigrid;
pub mod params;
pub mod smoother;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use grid::{GridField, StencilKernel};
