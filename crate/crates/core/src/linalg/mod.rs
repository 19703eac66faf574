//! Sparse weights, the shift operator S(λ) = I - λW, log-determinants and trace estimation.

pub mod dense;
pub mod logdet;
pub mod shift;
pub mod sparse;
pub mod trace;

pub use dense::DenseMatrix;
pub use logdet::{log_abs_det_shift, EigenLogDet, LogDetEvaluator, LogDetStrategy};
pub use shift::{apply_shift, solve_shift, trace_sts, DenseShiftFactor, ShiftOperator, TraceCache};
pub use sparse::{CsrMatrix, RowNormalized, SparseWeights};
pub use trace::{diagonal_estimator, trace_estimator, LinearOperator, TraceEstimate, TraceMode};
