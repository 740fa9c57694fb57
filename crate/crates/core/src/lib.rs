//! Differentiable enforcement of nonlinear equality and inequality
//! constraints on vector outputs.
//!
//! The core primitive is a damped projection step based on local
//! linearizations of the constraints: starting from an arbitrary point,
//! repeated steps drive the constraint violation to zero while every
//! step stays differentiable, so a neural network can be trained through
//! the whole unrolled iteration.
//!
//! Crate layout:
//! - [`constraints`]: constraint sets, the stacked constraint vector,
//!   the clipped violation residual and its Jacobians.
//! - [`projector`]: the projection step rules (vanilla parallel
//!   projection, damped projection, Levenberg-Marquardt), the iteration
//!   driver, and empirical checks of the geometric decay bound.
//! - [`diffprog`]: a small reverse-mode tape over dense vector/matrix
//!   primitives, enough to differentiate an MLP composed with the
//!   unrolled projection.
//! - [`mlp`]: a two-hidden-layer feed-forward network and an Adam
//!   training loop whose loss is evaluated on the projected output.
//! - [`mpcbench`]: a finite-horizon MPC problem with a quadratic state
//!   constraint, a barrier interior-point oracle, and suboptimality /
//!   violation reporting.

pub mod constraints;
pub mod diffprog;
pub mod mlp;
pub mod mpcbench;
pub mod projector;
