//! Linear-quadratic forms s = (εᵀA_jε)_j + Bᵀε: closed-form conditional moments and a
//! Monte Carlo sampler used as an oracle for them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SarError};
use crate::linalg::dense::dot;
use crate::linalg::{CsrMatrix, DenseMatrix, LinearOperator};
use crate::model::ErrorDistribution;

const BLOCK: usize = 65_536;
const SYM_TOL: f64 = 1e-12;

/// One symmetric quadratic-term matrix.
#[derive(Clone, Debug)]
pub enum LqMatrix {
    Zero(usize),
    Sparse(CsrMatrix),
    Dense(DenseMatrix),
}

impl LqMatrix {
    pub fn dim(&self) -> usize {
        match self {
            LqMatrix::Zero(n) => *n,
            LqMatrix::Sparse(m) => m.nrows(),
            LqMatrix::Dense(m) => m.nrows(),
        }
    }

    /// Materializes an operator densely; only sensible for moderate n.
    pub fn from_operator(op: &dyn LinearOperator) -> Result<Self> {
        Ok(LqMatrix::Dense(op.to_dense()?))
    }

    fn symmetrize(self) -> Result<Self> {
        Ok(match self {
            LqMatrix::Zero(n) => LqMatrix::Zero(n),
            LqMatrix::Sparse(m) => {
                if m.nrows() != m.ncols() {
                    return Err(SarError::Dimension("quadratic-term matrix must be square".into()));
                }
                LqMatrix::Sparse(CsrMatrix::lin_comb(0.5, &m, 0.5, &m.transpose())?)
            }
            LqMatrix::Dense(m) => LqMatrix::Dense(m.symmetrized()?),
        })
    }

    pub fn diag(&self) -> Vec<f64> {
        match self {
            LqMatrix::Zero(n) => vec![0.0; *n],
            LqMatrix::Sparse(m) => m.diag(),
            LqMatrix::Dense(m) => m.diag(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            LqMatrix::Zero(_) => true,
            LqMatrix::Sparse(m) => m.nnz() == 0,
            LqMatrix::Dense(m) => m.max_abs() == 0.0,
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        match self {
            LqMatrix::Zero(n) => DenseMatrix::zeros(*n, *n),
            LqMatrix::Sparse(m) => m.to_dense(),
            LqMatrix::Dense(m) => m.clone(),
        }
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        match self {
            LqMatrix::Zero(_) => 0.0,
            LqMatrix::Sparse(m) => m.quad_form(x),
            LqMatrix::Dense(m) => {
                let n = m.nrows();
                let mut s = 0.0;
                for j in 0..n {
                    s += x[j] * dot(m.col(j), x);
                }
                s
            }
        }
    }

    fn max_asymmetry(&self) -> f64 {
        match self {
            LqMatrix::Zero(_) => 0.0,
            LqMatrix::Sparse(m) => m.triplets().map(|(i, j, v)| (v - m.get(j, i)).abs()).fold(0.0, f64::max),
            LqMatrix::Dense(m) => m.sub(&m.transpose()).map(|d| d.max_abs()).unwrap_or(f64::INFINITY),
        }
    }
}

/// Σ_{i,l} w_i w_l a_il b_il for symmetric A, B, i.e. tr(Υ A Υ B) with Υ = diag(w).
fn weighted_inner(a: &LqMatrix, b: &LqMatrix, w: &[f64]) -> f64 {
    use LqMatrix::*;
    match (a, b) {
        (Zero(_), _) | (_, Zero(_)) => 0.0,
        (Dense(x), Dense(y)) => {
            let n = x.nrows();
            let mut s = 0.0;
            for l in 0..n {
                let (cx, cy) = (x.col(l), y.col(l));
                let mut t = 0.0;
                for i in 0..n {
                    t += w[i] * cx[i] * cy[i];
                }
                s += w[l] * t;
            }
            s
        }
        (Sparse(x), Dense(y)) | (Dense(y), Sparse(x)) => x.triplets().map(|(i, l, v)| w[i] * w[l] * v * y[(i, l)]).sum(),
        (Sparse(x), Sparse(y)) => {
            let mut s = 0.0;
            for i in 0..x.nrows() {
                let (cx, vx) = x.row(i);
                let (cy, vy) = y.row(i);
                let (mut p, mut q) = (0, 0);
                while p < cx.len() && q < cy.len() {
                    match cx[p].cmp(&cy[q]) {
                        std::cmp::Ordering::Less => p += 1,
                        std::cmp::Ordering::Greater => q += 1,
                        std::cmp::Ordering::Equal => {
                            s += w[i] * w[cx[p]] * vx[p] * vy[q];
                            p += 1;
                            q += 1;
                        }
                    }
                }
            }
            s
        }
    }
}

/// s = (εᵀA_1ε, …, εᵀA_dε)ᵀ + Bᵀε with every A_j stored symmetrized.
#[derive(Clone, Debug)]
pub struct LqForm {
    a: Vec<LqMatrix>,
    b: DenseMatrix,
    diags: Vec<Vec<f64>>,
}

impl LqForm {
    /// Each A_j is replaced by (A_j + A_jᵀ)/2; B is n × d.
    pub fn new(a: Vec<LqMatrix>, b: DenseMatrix) -> Result<Self> {
        let d = a.len();
        if d == 0 {
            return Err(SarError::InvalidInput("linear-quadratic form needs d >= 1".into()));
        }
        let n = b.nrows();
        if b.ncols() != d {
            return Err(SarError::Dimension(format!("B has {} columns for d = {d}", b.ncols())));
        }
        if a.iter().any(|m| m.dim() != n) {
            return Err(SarError::Dimension(format!("every A_j must be {n}x{n}")));
        }
        if b.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(SarError::NonFinite("B".into()));
        }
        let a = a.into_iter().map(LqMatrix::symmetrize).collect::<Result<Vec<_>>>()?;
        debug_assert!(a.iter().all(|m| m.max_asymmetry() <= SYM_TOL * (1.0 + m.to_dense().max_abs())));
        let diags = a.iter().map(LqMatrix::diag).collect();
        Ok(Self { a, b, diags })
    }

    pub fn n(&self) -> usize {
        self.b.nrows()
    }

    pub fn d(&self) -> usize {
        self.a.len()
    }

    pub fn a(&self) -> &[LqMatrix] {
        &self.a
    }

    pub fn b(&self) -> &DenseMatrix {
        &self.b
    }

    pub fn evaluate(&self, eps: &[f64]) -> Result<Vec<f64>> {
        let mut s = self.b.tr_matvec(eps)?;
        for (sj, a) in s.iter_mut().zip(&self.a) {
            *sj += a.quad_form(eps);
        }
        Ok(s)
    }
}

/// Per-observation conditional moments E[ε_i^k | F], k = 2, 3, 4.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentDiagonals {
    pub m2: Vec<f64>,
    pub m3: Vec<f64>,
    pub m4: Vec<f64>,
}

impl MomentDiagonals {
    pub fn new(m2: Vec<f64>, m3: Vec<f64>, m4: Vec<f64>) -> Result<Self> {
        if m2.len() != m3.len() || m2.len() != m4.len() {
            return Err(SarError::Dimension("moment vectors differ in length".into()));
        }
        for i in 0..m2.len() {
            if !(m2[i] > 0.0) || !m3[i].is_finite() || !(m4[i] >= m2[i] * m2[i] * (1.0 - 1e-12)) {
                return Err(SarError::InvalidInput(format!(
                    "moments at {i}: need m2 > 0 and m4 >= m2^2, got m2 = {}, m4 = {}",
                    m2[i], m4[i]
                )));
            }
        }
        Ok(Self { m2, m3, m4 })
    }

    pub fn homoskedastic(n: usize, m2: f64, m3: f64, m4: f64) -> Result<Self> {
        Self::new(vec![m2; n], vec![m3; n], vec![m4; n])
    }

    pub fn from_distribution(n: usize, err: &ErrorDistribution) -> Result<Self> {
        let (m2, m3, m4) = err.moments();
        Self::homoskedastic(n, m2, m3, m4)
    }

    pub fn n(&self) -> usize {
        self.m2.len()
    }

    /// μ⁽⁴⁾ - 3(μ⁽²⁾)², zero under normality.
    pub fn excess4(&self) -> Vec<f64> {
        self.m2.iter().zip(&self.m4).map(|(m2, m4)| m4 - 3.0 * m2 * m2).collect()
    }
}

fn check_dims(lq: &LqForm, moms: &MomentDiagonals) -> Result<()> {
    if lq.n() != moms.n() {
        return Err(SarError::Dimension(format!("form has n = {}, moments have {}", lq.n(), moms.n())));
    }
    Ok(())
}

/// E[s | F] = (tr(Υ⁽²⁾A_j))_j
pub fn lq_mean(lq: &LqForm, moms: &MomentDiagonals) -> Result<Vec<f64>> {
    check_dims(lq, moms)?;
    Ok(lq.diags.iter().map(|d| dot(d, &moms.m2)).collect())
}

/// The two parts of Cov[s | F]: the normal-theory part 2tr(Υ⁽²⁾A_jΥ⁽²⁾A_k) + b_jᵀΥ⁽²⁾b_k, and
/// the Υ⁽³⁾/Υ⁽⁴⁾ corrections Σ_i υ4_i a_j,ii a_k,ii + Σ_i υ3_i (b_j,i a_k,ii + b_k,i a_j,ii).
pub fn lq_cov_parts(lq: &LqForm, moms: &MomentDiagonals) -> Result<(DenseMatrix, DenseMatrix)> {
    check_dims(lq, moms)?;
    let d = lq.d();
    let u4 = moms.excess4();
    let u3 = &moms.m3;
    let mut gauss = DenseMatrix::zeros(d, d);
    let mut extra = DenseMatrix::zeros(d, d);
    for j in 0..d {
        for k in j..d {
            let bj = lq.b.col(j);
            let bk = lq.b.col(k);
            let mut lin = 0.0;
            for i in 0..lq.n() {
                lin += bj[i] * moms.m2[i] * bk[i];
            }
            let g = 2.0 * weighted_inner(&lq.a[j], &lq.a[k], &moms.m2) + lin;
            let (dj, dk) = (&lq.diags[j], &lq.diags[k]);
            let mut e = 0.0;
            for i in 0..lq.n() {
                e += u4[i] * dj[i] * dk[i] + u3[i] * (bj[i] * dk[i] + bk[i] * dj[i]);
            }
            gauss[(j, k)] = g;
            gauss[(k, j)] = g;
            extra[(j, k)] = e;
            extra[(k, j)] = e;
        }
    }
    Ok((gauss, extra))
}

/// Cov[s | F]
pub fn lq_cov(lq: &LqForm, moms: &MomentDiagonals) -> Result<DenseMatrix> {
    let (g, e) = lq_cov_parts(lq, moms)?;
    g.add(&e)
}

/// Monte Carlo moments of s and of the standardized statistic z = n^{-1/2}(s - E[s|F]).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LqSample {
    pub draws: usize,
    pub mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub cov: DenseMatrix,
    /// MC standard errors of each covariance entry, from fourth moments of s.
    pub cov_se: DenseMatrix,
    pub skewness: Vec<f64>,
    pub excess_kurtosis: Vec<f64>,
    /// Row-major draws × d samples of z.
    pub standardized: Vec<f64>,
}

/// Draws ε with i.i.d. entries from `err`, in blocks on independent ChaCha8 streams.
pub fn lq_sample(lq: &LqForm, err: &ErrorDistribution, draws: usize, seed: u64) -> Result<LqSample> {
    if draws < 10_000 {
        return Err(SarError::InvalidInput(format!("draws = {draws}, need at least 10000")));
    }
    let (n, d) = (lq.n(), lq.d());
    let center = lq_mean(lq, &MomentDiagonals::from_distribution(n, err)?)?;
    let blocks = draws.div_ceil(BLOCK);
    let parts: Vec<Vec<f64>> = (0..blocks)
        .into_par_iter()
        .map(|blk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(blk as u64);
            let len = BLOCK.min(draws - blk * BLOCK);
            let mut out = Vec::with_capacity(len * d);
            let mut eps = vec![0.0; n];
            for _ in 0..len {
                for e in eps.iter_mut() {
                    *e = err.sample(&mut rng);
                }
                let s = lq.evaluate(&eps).expect("dimensions checked at construction");
                out.extend(s.iter().zip(&center).map(|(v, c)| v - c));
            }
            out
        })
        .collect();
    let centered: Vec<f64> = parts.concat();
    let rows = |t: usize| &centered[t * d..(t + 1) * d];
    let nf = draws as f64;
    let mut m = vec![0.0; d];
    for t in 0..draws {
        for (mj, v) in m.iter_mut().zip(rows(t)) {
            *mj += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= nf);
    let mut c = DenseMatrix::zeros(d, d);
    let mut c2 = DenseMatrix::zeros(d, d);
    let mut m3 = vec![0.0; d];
    let mut m4 = vec![0.0; d];
    for t in 0..draws {
        let r = rows(t);
        for j in 0..d {
            let dj = r[j] - m[j];
            m3[j] += dj.powi(3);
            m4[j] += dj.powi(4);
            for k in j..d {
                let p = dj * (r[k] - m[k]);
                c[(j, k)] += p;
                c2[(j, k)] += p * p;
            }
        }
    }
    let mut cov = DenseMatrix::zeros(d, d);
    let mut cov_se = DenseMatrix::zeros(d, d);
    for j in 0..d {
        for k in j..d {
            let mean_p = c[(j, k)] / nf;
            let var_p = (c2[(j, k)] / nf - mean_p * mean_p).max(0.0);
            cov[(j, k)] = mean_p;
            cov[(k, j)] = mean_p;
            cov_se[(j, k)] = (var_p / nf).sqrt();
            cov_se[(k, j)] = cov_se[(j, k)];
        }
    }
    let mean: Vec<f64> = m.iter().zip(&center).map(|(a, b)| a + b).collect();
    let mean_se: Vec<f64> = (0..d).map(|j| (cov[(j, j)] / nf).sqrt()).collect();
    let skewness = (0..d).map(|j| m3[j] / nf / cov[(j, j)].powf(1.5)).collect();
    let excess_kurtosis = (0..d).map(|j| m4[j] / nf / cov[(j, j)].powi(2) - 3.0).collect();
    let scale = 1.0 / (n as f64).sqrt();
    let standardized = centered.into_iter().map(|v| v * scale).collect();
    Ok(LqSample { draws, mean, mean_se, cov, cov_se, skewness, excess_kurtosis, standardized })
}

/// Random n×n sparse matrix with about `per_row` entries per row, entries in [-1, 1].
pub fn random_sparse(n: usize, per_row: usize, rng: &mut impl rand::Rng) -> Result<CsrMatrix> {
    let mut t = Vec::with_capacity(n * per_row);
    for i in 0..n {
        for _ in 0..per_row {
            t.push((i, rng.random_range(0..n), rng.random_range(-1.0..1.0)));
        }
    }
    CsrMatrix::from_triplets(n, n, &t)
}

/// A random instance with `d` sparse quadratic terms and a dense B, as used by `lqcheck`.
pub fn random_instance(n: usize, d: usize, seed: u64) -> Result<LqForm> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_row = 3.min(n);
    let a = (0..d).map(|_| random_sparse(n, per_row, &mut rng).map(LqMatrix::Sparse)).collect::<Result<Vec<_>>>()?;
    let mut b = DenseMatrix::zeros(n, d);
    for v in b.as_mut_slice() {
        *v = rand::Rng::random_range(&mut rng, -0.5..0.5);
    }
    LqForm::new(a, b)
}
