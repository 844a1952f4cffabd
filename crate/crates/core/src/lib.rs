//! Difference-in-differences with covariates: TWFE fits and their implicit
//! weights, group-time ATT estimators, multiplier bootstrap inference and a
//! simulator with known ground truth.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod dgp;
pub mod diagnostics;
pub mod error;
pub mod exec;
pub mod gtatt;
pub mod inference;
pub mod linproj;
pub mod panel;
pub mod twfe;

pub use error::{Error, Result};
pub use exec::Execution;
pub use panel::PanelDataset;
