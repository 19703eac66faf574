//! Spatial autoregressive models y = λWy + Xβ + ε estimated by quasi-score matching,
//! with a quasi-maximum likelihood baseline, sandwich inference and a simulation harness.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod cli;
pub mod error;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod lqform;
pub mod model;
pub mod netgen;
pub mod optim;
pub mod qmle;
pub mod qsm;
pub mod report;
pub mod simharness;

pub use error::{Result, SarError};
pub use model::{ErrorDistribution, ParamVector, SarData};
pub use report::{FitOptions, FitReport, Method};
