use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dense::{dot, DenseMatrix};
use super::shift::{solve_shift, DenseShiftFactor, ShiftOperator};
use super::sparse::{CsrMatrix, SparseWeights};
use crate::error::Result;

/// Square linear map applied matrix-free.
pub trait LinearOperator: Send + Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>>;

    /// Exact diagonal when it is cheap; None makes callers fall back to unit-vector probes.
    fn diagonal(&self) -> Option<Vec<f64>> {
        None
    }

    fn to_dense(&self) -> Result<DenseMatrix> {
        let n = self.dim();
        let mut out = DenseMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let c = self.apply(&e)?;
            out.col_mut(j).copy_from_slice(&c);
            e[j] = 0.0;
        }
        Ok(out)
    }
}

impl LinearOperator for CsrMatrix {
    fn dim(&self) -> usize {
        self.nrows()
    }
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.matvec(x))
    }
    fn diagonal(&self) -> Option<Vec<f64>> {
        Some(self.diag())
    }
    fn to_dense(&self) -> Result<DenseMatrix> {
        Ok(CsrMatrix::to_dense(self))
    }
}

impl LinearOperator for DenseMatrix {
    fn dim(&self) -> usize {
        self.nrows()
    }
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.matvec(x)
    }
    fn diagonal(&self) -> Option<Vec<f64>> {
        Some(self.diag())
    }
    fn to_dense(&self) -> Result<DenseMatrix> {
        Ok(self.clone())
    }
}

impl LinearOperator for SparseWeights {
    fn dim(&self) -> usize {
        self.n()
    }
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(SparseWeights::apply(self, x))
    }
    fn diagonal(&self) -> Option<Vec<f64>> {
        Some(vec![0.0; self.n()])
    }
}

/// S(λ)⁻¹ or S(λ)⁻ᵀ, by dense LU when one is supplied and iterative solves otherwise.
pub struct ShiftInverse<'a> {
    op: ShiftOperator<'a>,
    transpose: bool,
    factor: Option<&'a DenseShiftFactor>,
}

impl<'a> ShiftInverse<'a> {
    pub fn new(op: ShiftOperator<'a>, transpose: bool, factor: Option<&'a DenseShiftFactor>) -> Self {
        Self { op, transpose, factor }
    }
}

impl LinearOperator for ShiftInverse<'_> {
    fn dim(&self) -> usize {
        self.op.n()
    }
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self.factor {
            Some(f) if self.transpose => Ok(f.solve_t(x)),
            Some(f) => Ok(f.solve(x)),
            None => solve_shift(&self.op, x, self.transpose),
        }
    }
}

/// Product A₁ A₂ ⋯ A_k applied right to left.
pub struct OpProduct<'a>(pub Vec<&'a dyn LinearOperator>);

impl LinearOperator for OpProduct<'_> {
    fn dim(&self) -> usize {
        self.0.first().map_or(0, |a| a.dim())
    }
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut v = x.to_vec();
        for a in self.0.iter().rev() {
            v = a.apply(&v)?;
        }
        Ok(v)
    }
}

/// (A + Aᵀ)/2 for an operator given with its transpose.
pub struct Symmetrized<'a> {
    pub a: &'a dyn LinearOperator,
    pub at: &'a dyn LinearOperator,
}

impl LinearOperator for Symmetrized<'_> {
    fn dim(&self) -> usize {
        self.a.dim()
    }
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let u = self.a.apply(x)?;
        let v = self.at.apply(x)?;
        Ok(u.iter().zip(v).map(|(p, q)| 0.5 * (p + q)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum TraceMode {
    ExactDense,
    Stochastic { probes: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub value: f64,
    /// Monte Carlo standard error; zero in exact mode.
    pub std_error: f64,
}

pub fn rademacher(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// tr(A) exactly or by Hutchinson's estimator with Rademacher probes.
pub fn trace_estimator(op: &dyn LinearOperator, mode: TraceMode) -> Result<TraceEstimate> {
    match mode {
        TraceMode::ExactDense => {
            let d = match op.diagonal() {
                Some(d) => d,
                None => unit_probe_diagonal(op)?,
            };
            Ok(TraceEstimate { value: d.iter().sum(), std_error: 0.0 })
        }
        TraceMode::Stochastic { probes, seed } => {
            let n = op.dim();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut samples = Vec::with_capacity(probes);
            for _ in 0..probes.max(2) {
                let z = rademacher(&mut rng, n);
                let az = op.apply(&z)?;
                samples.push(dot(&z, &az));
            }
            let (mean, se) = mean_and_se(&samples);
            Ok(TraceEstimate { value: mean, std_error: se })
        }
    }
}

/// diag(A) exactly or by the Hutchinson diagonal estimator E[z ∘ Az].
pub fn diagonal_estimator(op: &dyn LinearOperator, mode: TraceMode) -> Result<Vec<f64>> {
    match mode {
        TraceMode::ExactDense => match op.diagonal() {
            Some(d) => Ok(d),
            None => unit_probe_diagonal(op),
        },
        TraceMode::Stochastic { probes, seed } => {
            let n = op.dim();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut acc = vec![0.0; n];
            let k = probes.max(1);
            for _ in 0..k {
                let z = rademacher(&mut rng, n);
                let az = op.apply(&z)?;
                for i in 0..n {
                    acc[i] += z[i] * az[i];
                }
            }
            Ok(acc.into_iter().map(|v| v / k as f64).collect())
        }
    }
}

fn unit_probe_diagonal(op: &dyn LinearOperator) -> Result<Vec<f64>> {
    let n = op.dim();
    let mut e = vec![0.0; n];
    let mut d = Vec::with_capacity(n);
    for i in 0..n {
        e[i] = 1.0;
        d.push(op.apply(&e)?[i]);
        e[i] = 0.0;
    }
    Ok(d)
}

pub fn mean_and_se(x: &[f64]) -> (f64, f64) {
    let k = x.len() as f64;
    let mean = x.iter().sum::<f64>() / k;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}
