//! Data, parameters and error laws for y = λWy + Xβ + ε.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SarError};
use crate::linalg::shift::{solve_shift, ShiftOperator, TraceCache};
use crate::linalg::{DenseMatrix, SparseWeights};

const RANK_TOL: f64 = 1e-10;

/// Validated SAR data set with cached traces of W.
#[derive(Clone, Debug)]
pub struct SarData {
    y: Vec<f64>,
    x: DenseMatrix,
    weights: SparseWeights,
    traces: TraceCache,
    names: Vec<String>,
}

impl SarData {
    pub fn new(y: Vec<f64>, x: DenseMatrix, weights: SparseWeights) -> Result<Self> {
        let names = (1..=x.ncols()).map(|j| format!("beta{j}")).collect();
        Self::with_names(y, x, weights, names)
    }

    pub fn with_names(y: Vec<f64>, x: DenseMatrix, weights: SparseWeights, names: Vec<String>) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n || weights.n() != n {
            return Err(SarError::Dimension(format!(
                "y has {n} rows, X has {}, W is {}x{}",
                x.nrows(),
                weights.n(),
                weights.n()
            )));
        }
        if names.len() != x.ncols() {
            return Err(SarError::Dimension("one name per covariate column".into()));
        }
        if n < x.ncols().max(1) {
            return Err(SarError::InvalidInput(format!("n = {n} too small for {} covariates", x.ncols())));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(SarError::NonFinite("y".into()));
        }
        if x.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(SarError::NonFinite("X".into()));
        }
        let rank = x.rank(RANK_TOL);
        if rank < x.ncols() {
            return Err(SarError::RankDeficient { rank, cols: x.ncols() });
        }
        let traces = TraceCache::new(&weights);
        Ok(Self { y, x, weights, traces, names })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &DenseMatrix {
        &self.x
    }

    pub fn weights(&self) -> &SparseWeights {
        &self.weights
    }

    pub fn traces(&self) -> &TraceCache {
        &self.traces
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.names
    }

    /// lambda, covariate names, sigma2.
    pub fn param_names(&self) -> Vec<String> {
        let mut v = vec!["lambda".to_string()];
        v.extend(self.names.iter().cloned());
        v.push("sigma2".into());
        v
    }

    pub fn shift(&self, lambda: f64) -> Result<ShiftOperator<'_>> {
        ShiftOperator::new(&self.weights, lambda)
    }
}

/// θ = (λ, β, σ²).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub lambda: f64,
    pub beta: Vec<f64>,
    pub sigma2: f64,
}

impl ParamVector {
    pub fn new(lambda: f64, beta: Vec<f64>, sigma2: f64) -> Self {
        Self { lambda, beta, sigma2 }
    }

    pub fn dim(&self) -> usize {
        self.beta.len() + 2
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.push(self.lambda);
        v.extend_from_slice(&self.beta);
        v.push(self.sigma2);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() < 3 {
            return Err(SarError::Dimension(format!("parameter vector of length {}", v.len())));
        }
        Ok(Self { lambda: v[0], beta: v[1..v.len() - 1].to_vec(), sigma2: v[v.len() - 1] })
    }
}

/// Unit-variance sampler with known moments, for user-supplied error laws.
pub trait CustomErrors: Send + Sync {
    fn sample(&self, rng: &mut dyn RngCore) -> f64;
    /// (m2, m3, m4)
    fn moments(&self) -> (f64, f64, f64);
}

/// Law of the standardized errors ε_i / σ.
#[derive(Clone)]
pub enum ErrorDistribution {
    StandardNormal,
    /// Zero-mean normal mixture; weights sum to one and Σ w v = 1.
    MixtureNormal { weights: Vec<f64>, variances: Vec<f64> },
    Custom(Arc<dyn CustomErrors>),
}

impl fmt::Debug for ErrorDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::StandardNormal => write!(f, "StandardNormal"),
            Self::MixtureNormal { weights, variances } => {
                write!(f, "MixtureNormal {{ weights: {weights:?}, variances: {variances:?} }}")
            }
            Self::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl ErrorDistribution {
    pub fn mixture_normal(weights: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        if weights.len() != variances.len() || weights.is_empty() {
            return Err(SarError::InvalidInput("mixture weights and variances differ in length".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || variances.iter().any(|v| !(*v > 0.0)) {
            return Err(SarError::InvalidInput("mixture weights must be >= 0 and variances > 0".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(SarError::InvalidInput(format!("mixture weights sum to {total}")));
        }
        let var: f64 = weights.iter().zip(&variances).map(|(w, v)| w * v).sum();
        if (var - 1.0).abs() > 1e-12 {
            return Err(SarError::InvalidInput(format!("mixture variance is {var}, expected 1")));
        }
        Ok(Self::MixtureNormal { weights, variances })
    }

    /// 0.9 N(0, 5/9) + 0.1 N(0, 5)
    pub fn contaminated_normal() -> Self {
        Self::mixture_normal(vec![0.9, 0.1], vec![5.0 / 9.0, 5.0]).expect("valid mixture")
    }

    /// (m2, m3, m4) of the standardized law.
    pub fn moments(&self) -> (f64, f64, f64) {
        match self {
            Self::StandardNormal => (1.0, 0.0, 3.0),
            Self::MixtureNormal { weights, variances } => {
                let m4 = weights.iter().zip(variances).map(|(w, v)| 3.0 * w * v * v).sum();
                (1.0, 0.0, m4)
            }
            Self::Custom(c) => c.moments(),
        }
    }

    pub fn sample<R: RngCore>(&self, rng: &mut R) -> f64 {
        match self {
            Self::StandardNormal => rng.sample(StandardNormal),
            Self::MixtureNormal { weights, variances } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut k = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        k = i;
                        break;
                    }
                }
                let z: f64 = rng.sample(StandardNormal);
                variances[k].sqrt() * z
            }
            Self::Custom(c) => c.sample(rng),
        }
    }

    pub fn sample_vec<R: RngCore>(&self, rng: &mut R, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

/// Draws y = S(λ₀)⁻¹ (Xβ₀ + σ₀ ε) with ε from a ChaCha8 stream seeded by `seed`.
pub fn simulate_sar(
    theta0: &ParamVector,
    x: &DenseMatrix,
    weights: &SparseWeights,
    errors: &ErrorDistribution,
    seed: u64,
) -> Result<SarData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = simulate_response(weights, x, theta0, errors, &mut rng)?;
    SarData::new(y, x.clone(), weights.clone())
}

/// Response draw on a caller-owned stream.
pub fn simulate_response<R: RngCore>(
    weights: &SparseWeights,
    x: &DenseMatrix,
    theta: &ParamVector,
    errors: &ErrorDistribution,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = weights.n();
    if x.nrows() != n || x.ncols() != theta.beta.len() {
        return Err(SarError::Dimension("X does not match W or β".into()));
    }
    if !(theta.sigma2 > 0.0) {
        return Err(SarError::InvalidInput("sigma2 must be positive".into()));
    }
    let sd = theta.sigma2.sqrt();
    let eps = errors.sample_vec(rng, n);
    let mut rhs = x.matvec(&theta.beta)?;
    for (r, e) in rhs.iter_mut().zip(&eps) {
        *r += sd * e;
    }
    let op = ShiftOperator::new(weights, theta.lambda)?;
    match solve_shift(&op, &rhs, false) {
        Err(SarError::SolveFailed { .. }) => Err(SarError::SingularShift { lambda: theta.lambda }),
        r => r,
    }
}

/// ε̂ = S(λ)y - Xβ
pub fn residuals(data: &SarData, theta: &ParamVector) -> Result<Vec<f64>> {
    if theta.beta.len() != data.p() {
        return Err(SarError::Dimension(format!("β has {} entries, X has {} columns", theta.beta.len(), data.p())));
    }
    let sy = data.shift(theta.lambda)?.apply(data.y());
    let xb = data.x().matvec(&theta.beta)?;
    Ok(sy.iter().zip(&xb).map(|(a, b)| a - b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contaminated_normal_moments() {
        let e = ErrorDistribution::contaminated_normal();
        let (m2, m3, m4) = e.moments();
        assert_eq!(m2, 1.0);
        assert_eq!(m3, 0.0);
        assert!((m4 - (0.9 * 3.0 * 25.0 / 81.0 + 0.1 * 3.0 * 25.0)).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xs = e.sample_vec(&mut rng, 400_000);
        let v = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64;
        let k = xs.iter().map(|x| x.powi(4)).sum::<f64>() / xs.len() as f64;
        assert!((v - 1.0).abs() < 0.01);
        assert!((k - m4).abs() < 0.3);
    }

    #[test]
    fn mixture_rejects_wrong_variance() {
        assert!(ErrorDistribution::mixture_normal(vec![0.5, 0.5], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn data_rejects_rank_deficient_design() {
        let w = SparseWeights::adjacency(6, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0)]).unwrap();
        let x = DenseMatrix::from_fn(6, 2, |_, _| 1.0);
        assert!(matches!(SarData::new(vec![0.0; 6], x, w), Err(SarError::RankDeficient { .. })));
    }

    #[test]
    fn three_cycle_reduced_form() {
        let w = SparseWeights::adjacency(3, &[(0, 1), (1, 2), (2, 0)]).unwrap().row_normalize().weights;
        let op = ShiftOperator::new(&w, 0.5).unwrap();
        let y = solve_shift(&op, &[1.0, 1.0, 1.0], false).unwrap();
        for v in y {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_lambda_gives_linear_model() {
        let w = SparseWeights::adjacency(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]).unwrap().row_normalize().weights;
        let x = DenseMatrix::from_fn(4, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let theta = ParamVector::new(0.0, vec![1.0, 2.0], 1.0);
        let d = simulate_sar(&theta, &x, &w, &ErrorDistribution::StandardNormal, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps = ErrorDistribution::StandardNormal.sample_vec(&mut rng, 4);
        for (i, e) in eps.iter().enumerate() {
            assert!((d.y()[i] - (1.0 + 2.0 * i as f64) - e).abs() < 1e-14);
        }
    }

    #[test]
    fn residuals_recover_drawn_errors() {
        let mut edges = Vec::new();
        for i in 0..30usize {
            edges.push((i, (i * 7 + 3) % 30));
            edges.push((i, (i * 11 + 5) % 30));
        }
        let w = SparseWeights::adjacency(30, &edges).unwrap().row_normalize().weights;
        let x = DenseMatrix::from_fn(30, 2, |i, j| if j == 0 { 1.0 } else { (i as f64).cos() });
        for seed in 0..50u64 {
            let theta = ParamVector::new(-0.8 + 0.03 * seed as f64, vec![2.0, 1.0], 1.0 + 0.1 * seed as f64);
            let d = simulate_sar(&theta, &x, &w, &ErrorDistribution::contaminated_normal(), seed).unwrap();
            let e = residuals(&d, &theta).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let eps = ErrorDistribution::contaminated_normal().sample_vec(&mut rng, 30);
            for i in 0..30 {
                assert!((e[i] - theta.sigma2.sqrt() * eps[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn seeded_draws_are_bit_identical() {
        let w = SparseWeights::adjacency(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)]).unwrap().row_normalize().weights;
        let x = DenseMatrix::from_fn(5, 1, |_, _| 1.0);
        let t = ParamVector::new(0.3, vec![1.0], 1.0);
        let a = simulate_sar(&t, &x, &w, &ErrorDistribution::StandardNormal, 9).unwrap();
        let b = simulate_sar(&t, &x, &w, &ErrorDistribution::StandardNormal, 9).unwrap();
        assert_eq!(a.y(), b.y());
    }

    #[test]
    fn param_vector_round_trip() {
        let t = ParamVector::new(0.3, vec![2.0, 1.0], 1.5);
        assert_eq!(ParamVector::from_slice(&t.to_vec()).unwrap(), t);
    }
}
