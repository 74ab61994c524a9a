//! Approximate randomization (sign-change) tests for regressions with few
//! clusters, their local asymptotic power, and selection of the way of
//! combining clusters that maximizes that power.
//!
//! The usual flow is: load a [`data::PanelDataset`], pick a
//! [`data::Grouping`] with one of the [`combiner`] routines, then run
//! [`crs::run_test`].

pub mod cli;
pub mod combiner;
pub mod crs;
pub mod data;
pub mod error;
pub mod estimation;
pub mod formula;
pub mod normal;
pub mod power;
pub mod rng;
pub mod simulation;

pub use data::{Group, Grouping, Hypothesis, PanelDataset, Schema};
pub use error::{Error, Result};
pub use estimation::{LimitParams, PsiMatrix, WorkingModel};
pub use formula::RegressionSpec;
