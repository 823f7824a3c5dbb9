//! conduct-lab: a numerical laboratory for random walks among random
//! conductances on finite lattice boxes.
//!
//! The crate builds the objects of the heavy-tailed random conductance model
//! and measures their analytic behaviour at desk scale:
//!
//! - [`lattice`]: boxes, balls, discrete gradients/divergences, averaged
//!   norms, Dirichlet forms, cutoff functions;
//! - [`environment`]: conductance generators (i.i.d., vertex-combined,
//!   Gaussian free field, percolation traps) with exact reproducibility and
//!   moment diagnostics;
//! - [`operators`]: generators of the constant-speed, variable-speed, and
//!   time-changed walks; heat kernels by uniformization with certified
//!   truncation errors; Green kernels by dual routes;
//! - [`inequalities`]: a verification harness for volume regularity,
//!   isoperimetry, Poincare and Sobolev inequalities, and a family of scalar
//!   estimates checked by randomized soak;
//! - [`harnack`]: Dirichlet solvers, elliptic/parabolic Harnack ratio
//!   measurement, near-diagonal kernel constants, oscillation decay;
//! - [`walker`]: Monte Carlo path simulation and covariance estimation;
//! - [`limit`]: the local-limit-theorem experiment, its error decomposition,
//!   the Green-kernel analogue, the trap counterexample mechanism, and
//!   heat-kernel moment machinery;
//! - [`cli`]: reproducible experiment runs with CSV/JSON artifacts.
//!
//! Start with the `examples/` directory: each file is a runnable tour of one
//! capability (`cargo run --release --example heat_kernels`, ...).

pub mod cli;
pub mod environment;
pub mod error;
pub mod harnack;
pub mod inequalities;
pub mod lattice;
pub mod limit;
pub mod numeric;
pub mod operators;
pub mod rng;
pub mod solver;
pub mod walker;

pub use error::{Error, Result};
