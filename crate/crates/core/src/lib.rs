//! Structural risk minimization (SRM) for learning one-step models of
//! nonlinear dynamics from sampled trajectories.
//!
//! A hierarchy of norm-constrained model classes (Gaussian / polynomial
//! kernel RKHS balls, or Frobenius-constrained ReLU networks) is fitted to a
//! trajectory dataset; each fitted class is scored by its clipped training
//! error plus a closed-form Rademacher penalty, and the class with the
//! smallest sum is selected.
//!
//! Module map:
//!
//! - [`data`]: trajectories, datasets and their CSV format
//! - [`risk`]: losses, output clipping, training error and Monte-Carlo true error
//! - [`complexity`]: Rademacher Monte-Carlo oracle, closed-form penalties,
//!   discretization grid and generalization bounds
//! - [`rkhs`]: kernels and the constrained kernel-expansion fit
//! - [`nn`]: Frobenius-constrained multilayer perceptrons
//! - [`srm`]: hierarchies, class fitting and the selection rule
//! - [`dynamics`]: vector fields, RK4 and trajectory generation
//! - [`experiment`]: JSON-configured experiment runner used by the CLI

pub mod complexity;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod opt;
pub mod risk;
pub mod rkhs;
pub mod rng;
pub mod srm;

pub use error::{Error, Result};
