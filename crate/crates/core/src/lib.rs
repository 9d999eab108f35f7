//! Non-intrusive reduced order models for time-series snapshot data.
//!
//! Snapshots are compressed with a truncated proper orthogonal decomposition
//! ([`pod`]) and the latent modal coefficients are propagated with one of three
//! engines:
//!
//! * [`rbf`]: radial basis function interpolation of the latent time derivative
//!   marched with forward Euler,
//! * [`node`]: a neural ordinary differential equation trained through an ODE
//!   solver,
//! * [`dmd`]: exact dynamic mode decomposition on the raw snapshots.
//!
//! [`metrics`] computes spatial RMSE trajectories and relative-error fields used
//! to compare the engines against a reference solution.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod container;
pub mod dmd;
pub mod error;
pub mod metrics;
pub mod node;
pub mod pod;
pub mod rbf;
pub mod snapshot;

pub use error::{Result, RomError};
pub use pod::{LatentTrajectory, PodBasis, ThinSvd, Truncation};
pub use snapshot::{CenteredSet, SnapshotSet, SyntheticKind, SyntheticSpec};
