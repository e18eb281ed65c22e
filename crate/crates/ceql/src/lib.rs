//! Differentiable symbolic regression with complex-valued weights.
//!
//! A fixed operator-graph network (summation nodes with complex edge
//! weights feeding a small operator library) is trained by gradient descent
//! to fit data, then pruned in stages until a compact closed-form expression
//! can be read off the surviving connections. Optimizing the weights in the
//! complex plane lets trajectories detour around the real-axis degeneracies
//! that make divisions, logarithms and square roots notoriously hard for
//! real-valued equation learners; the output is projected back onto the
//! real axis, so the recovered expressions are ordinary real formulas,
//! rational forms with genuine poles included.
//!
//! Module map:
//! - [`complex`]: complex scalars and the surrogate operator library
//! - [`graph`]: the network structure and forward evaluation
//! - [`autodiff`]: reverse-mode gradients and the finite-difference oracle
//! - [`train`]: the three-phase optimizer with pruning and cascade cleanup
//! - [`expr`]: expression trees, extraction, node counting, rendering
//! - [`bench`]: the benchmark registry, dataset sampling, and metrics
//! - [`frf`]: the frequency-response surrogate with per-resonance subnetworks

pub mod autodiff;
pub mod bench;
pub mod complex;
pub mod expr;
pub mod frf;
pub mod graph;
pub mod train;

pub use complex::{Complex, OperatorKind};
pub use expr::Expr;
pub use graph::Network;
