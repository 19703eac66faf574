use faer::linalg::solvers::Solve;
use faer::Mat;

use super::dense::{axpy, dot, norm_sq, DenseMatrix};
use super::sparse::{CsrMatrix, SparseWeights};
use crate::error::{Result, SarError};

pub const DEFAULT_LAMBDA_BOUNDS: (f64, f64) = (-0.995, 0.995);

/// S(λ) = I - λW, never materialised.
#[derive(Clone, Copy, Debug)]
pub struct ShiftOperator<'a> {
    weights: &'a SparseWeights,
    lambda: f64,
}

impl<'a> ShiftOperator<'a> {
    pub fn new(weights: &'a SparseWeights, lambda: f64) -> Result<Self> {
        if !lambda.is_finite() {
            return Err(SarError::NonFinite("lambda".into()));
        }
        Ok(Self { weights, lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn weights(&self) -> &'a SparseWeights {
        self.weights
    }

    pub fn n(&self) -> usize {
        self.weights.n()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        apply_shift(self, v, false)
    }

    pub fn apply_t(&self, v: &[f64]) -> Vec<f64> {
        apply_shift(self, v, true)
    }

    /// S as an explicit sparse matrix.
    pub fn to_csr(&self) -> CsrMatrix {
        CsrMatrix::lin_comb(1.0, &CsrMatrix::identity(self.n()), -self.lambda, self.weights.csr())
            .expect("shapes agree")
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut s = self.weights.to_dense().scale(-self.lambda);
        for i in 0..self.n() {
            s[(i, i)] += 1.0;
        }
        s
    }
}

/// S v or Sᵀ v in O(nnz).
pub fn apply_shift(op: &ShiftOperator<'_>, v: &[f64], transpose: bool) -> Vec<f64> {
    let wv = if transpose { op.weights.apply_transpose(v) } else { op.weights.apply(v) };
    v.iter().zip(wv).map(|(a, b)| a - op.lambda * b).collect()
}

/// Settings for the iterative shift solver.
#[derive(Clone, Copy, Debug)]
pub struct SolveOptions {
    pub rel_tol: f64,
    pub restart: usize,
    pub max_iter: usize,
    pub dense_fallback_max_n: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { rel_tol: 1e-12, restart: 50, max_iter: 2000, dense_fallback_max_n: 5000 }
    }
}

/// Solves S x = b (or Sᵀ x = b) with restarted GMRES; falls back to a dense LU when
/// GMRES stalls and n is small enough.
pub fn solve_shift(op: &ShiftOperator<'_>, b: &[f64], transpose: bool) -> Result<Vec<f64>> {
    solve_shift_with(op, b, transpose, &SolveOptions::default())
}

pub fn solve_shift_with(op: &ShiftOperator<'_>, b: &[f64], transpose: bool, opts: &SolveOptions) -> Result<Vec<f64>> {
    let n = op.n();
    if b.len() != n {
        return Err(SarError::Dimension(format!("rhs of length {} for n = {n}", b.len())));
    }
    let bnorm = norm_sq(b).sqrt();
    if bnorm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let apply = |v: &[f64]| apply_shift(op, v, transpose);
    let (x, res) = gmres(&apply, b, opts);
    if res <= opts.rel_tol * 10.0 * bnorm && x.iter().all(|v| v.is_finite()) {
        return Ok(x);
    }
    if n <= opts.dense_fallback_max_n {
        let f = DenseShiftFactor::new(op)?;
        let x = if transpose { f.solve_t(b) } else { f.solve(b) };
        let r = apply(&x);
        let res = r.iter().zip(b).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt();
        if res <= 1e-9 * bnorm {
            return Ok(x);
        }
        return Err(SarError::SolveFailed { lambda: op.lambda, residual: res / bnorm });
    }
    Err(SarError::SolveFailed { lambda: op.lambda, residual: res / bnorm })
}

/// Restarted GMRES with modified Gram-Schmidt and Givens rotations. Returns (x, ‖b - Ax‖).
fn gmres(apply: &dyn Fn(&[f64]) -> Vec<f64>, b: &[f64], opts: &SolveOptions) -> (Vec<f64>, f64) {
    let n = b.len();
    let m = opts.restart.max(1).min(n);
    let bnorm = norm_sq(b).sqrt();
    let tol = opts.rel_tol * bnorm;
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut beta = bnorm;
    let mut iters = 0;
    while iters < opts.max_iter {
        if beta <= tol {
            break;
        }
        let mut v: Vec<Vec<f64>> = Vec::with_capacity(m + 1);
        v.push(r.iter().map(|a| a / beta).collect());
        let mut h = vec![vec![0.0; m]; m + 1];
        let mut cs = vec![0.0; m];
        let mut sn = vec![0.0; m];
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            iters += 1;
            let mut w = apply(&v[k]);
            for i in 0..=k {
                let hik = dot(&w, &v[i]);
                h[i][k] = hik;
                axpy(-hik, &v[i], &mut w);
            }
            let wn = norm_sq(&w).sqrt();
            h[k + 1][k] = wn;
            for i in 0..k {
                let t = cs[i] * h[i][k] + sn[i] * h[i + 1][k];
                h[i + 1][k] = -sn[i] * h[i][k] + cs[i] * h[i + 1][k];
                h[i][k] = t;
            }
            let den = (h[k][k] * h[k][k] + h[k + 1][k] * h[k + 1][k]).sqrt();
            if den == 0.0 {
                k_used = k;
                break;
            }
            cs[k] = h[k][k] / den;
            sn[k] = h[k + 1][k] / den;
            h[k][k] = den;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            if g[k + 1].abs() <= tol || wn == 0.0 || iters >= opts.max_iter {
                break;
            }
            v.push(w.iter().map(|a| a / wn).collect());
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in i + 1..k_used {
                s -= h[i][j] * y[j];
            }
            y[i] = s / h[i][i];
        }
        for (i, yi) in y.iter().enumerate() {
            axpy(*yi, &v[i], &mut x);
        }
        let ax = apply(&x);
        r = b.iter().zip(&ax).map(|(a, c)| a - c).collect();
        let new_beta = norm_sq(&r).sqrt();
        if k_used == 0 || new_beta >= beta {
            beta = new_beta;
            break;
        }
        beta = new_beta;
    }
    (x, beta)
}

/// Dense LU of S(λ) for repeated solves at a fixed λ.
pub struct DenseShiftFactor {
    lambda: f64,
    lu: faer::linalg::solvers::PartialPivLu<f64>,
    n: usize,
}

impl DenseShiftFactor {
    pub fn new(op: &ShiftOperator<'_>) -> Result<Self> {
        let n = op.n();
        let mut s = Mat::<f64>::zeros(n, n);
        for i in 0..n {
            s[(i, i)] = 1.0;
        }
        for (i, j, v) in op.weights().csr().triplets() {
            s[(i, j)] -= op.lambda() * v;
        }
        let lu = s.partial_piv_lu();
        let u = lu.U();
        let umax = (0..n).fold(0.0f64, |m, i| m.max(u[(i, i)].abs()));
        let umin = (0..n).fold(f64::INFINITY, |m, i| m.min(u[(i, i)].abs()));
        if !(umin > 1e-13 * umax.max(1.0)) {
            return Err(SarError::SingularShift { lambda: op.lambda() });
        }
        Ok(Self { lambda: op.lambda(), lu, n })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// log|det S| from the U diagonal.
    pub fn log_abs_det(&self) -> f64 {
        let u = self.lu.U();
        (0..self.n).map(|i| u[(i, i)].abs().ln()).sum()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let rhs = Mat::<f64>::from_fn(self.n, 1, |i, _| b[i]);
        let x = self.lu.solve(rhs);
        (0..self.n).map(|i| x[(i, 0)]).collect()
    }

    pub fn solve_t(&self, b: &[f64]) -> Vec<f64> {
        let mut rhs = Mat::<f64>::from_fn(self.n, 1, |i, _| b[i]);
        self.lu.solve_transpose_in_place(rhs.as_mut());
        (0..self.n).map(|i| rhs[(i, 0)]).collect()
    }

    /// S⁻¹ as a dense matrix.
    pub fn inverse(&self) -> DenseMatrix {
        use faer::linalg::solvers::DenseSolveCore;
        DenseMatrix::from_faer(&self.lu.inverse())
    }

    pub fn solve_dense(&self, b: &DenseMatrix) -> DenseMatrix {
        DenseMatrix::from_faer(&self.lu.solve(b.to_faer()))
    }
}

/// Cached traces of W that make tr(SᵀS) and tr(S) closed-form in λ.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraceCache {
    pub tr_w: f64,
    pub frob_w_sq: f64,
    pub tr_ww: f64,
}

impl TraceCache {
    pub fn new(w: &SparseWeights) -> Self {
        let csr = w.csr();
        Self { tr_w: csr.trace(), frob_w_sq: csr.frobenius_sq(), tr_ww: csr.trace_of_product(csr) }
    }
}

/// tr(SᵀS) = n - 2λ tr(W) + λ² ‖W‖_F²
pub fn trace_sts(lambda: f64, n: usize, cache: &TraceCache) -> f64 {
    n as f64 - 2.0 * lambda * cache.tr_w + lambda * lambda * cache.frob_w_sq
}

/// Checks λ against the admissible interval.
pub fn check_lambda(lambda: f64, bounds: (f64, f64)) -> Result<()> {
    if !(lambda >= bounds.0 && lambda <= bounds.1) {
        return Err(SarError::LambdaOutOfRange { lambda, lo: bounds.0, hi: bounds.1 });
    }
    Ok(())
}
