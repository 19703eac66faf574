//! Quasi-score matching: the determinant-free objective D_n, its concentrated form in λ,
//! the estimator, the analytic score and the efficiency-improved β and σ².

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SarError};
use crate::inference;
use crate::linalg::dense::{dot, norm_sq, spd_solve};
use crate::linalg::shift::{check_lambda, solve_shift, trace_sts, ShiftOperator};
use crate::linalg::{CsrMatrix, DenseMatrix};
use crate::lqform::{LqForm, LqMatrix};
use crate::model::{residuals, ParamVector, SarData};
use crate::optim::grid_then_brent;
use crate::qmle;
use crate::report::{FitOptions, FitReport, Method};

/// D_n(θ) = -tr(SᵀS)/σ² + ‖Sᵀ(Sy - Xβ)‖² / (2σ⁴)
pub fn objective_full(data: &SarData, theta: &ParamVector) -> Result<f64> {
    if !(theta.sigma2 > 0.0) {
        return Err(SarError::InvalidInput(format!("sigma2 = {} must be positive", theta.sigma2)));
    }
    let e = residuals(data, theta)?;
    let r = data.shift(theta.lambda)?.apply_t(&e);
    let tr = trace_sts(theta.lambda, data.n(), data.traces());
    let s2 = theta.sigma2;
    Ok(-tr / s2 + norm_sq(&r) / (2.0 * s2 * s2))
}

/// Solution of the weighted least-squares problem behind β̂(λ).
struct Concentrated {
    beta: Vec<f64>,
    rss: f64,
    tr: f64,
}

impl Concentrated {
    fn sigma2(&self) -> f64 {
        self.rss / self.tr
    }

    fn objective(&self) -> f64 {
        -self.tr * self.tr / (2.0 * self.rss)
    }
}

/// min_β ‖v - Zβ‖² with Z = SᵀX, v = SᵀSy.
fn weighted_ls(z: &DenseMatrix, v: &[f64], tr: f64, lambda: f64) -> Result<Concentrated> {
    let p = z.ncols();
    let gram = DenseMatrix::from_fn(p, p, |i, j| dot(z.col(i), z.col(j)));
    let rhs: Vec<f64> = z.columns().map(|c| dot(c, v)).collect();
    let beta = if p == 0 {
        Vec::new()
    } else {
        spd_solve(&gram, &rhs).ok_or_else(|| {
            SarError::Optimizer(format!("XᵀS(λ)S(λ)ᵀX is singular at lambda = {lambda}"))
        })?
    };
    let mut r = v.to_vec();
    for (j, b) in beta.iter().enumerate() {
        for (ri, zi) in r.iter_mut().zip(z.col(j)) {
            *ri -= b * zi;
        }
    }
    let rss = norm_sq(&r);
    if !(rss > 1e-24 * norm_sq(v)) || !(tr > 0.0) {
        return Err(SarError::Optimizer(format!("degenerate concentrated objective at lambda = {lambda}")));
    }
    Ok(Concentrated { beta, rss, tr })
}

fn concentrate(data: &SarData, lambda: f64) -> Result<Concentrated> {
    let op = data.shift(lambda)?;
    let v = op.apply_t(&op.apply(data.y()));
    let mut z = DenseMatrix::zeros(data.n(), data.p());
    for j in 0..data.p() {
        z.col_mut(j).copy_from_slice(&op.apply_t(data.x().col(j)));
    }
    weighted_ls(&z, &v, trace_sts(lambda, data.n(), data.traces()), lambda)
}

/// β̂(λ) = (XᵀSSᵀX)⁻¹ XᵀSSᵀSy
pub fn beta_hat_given_lambda(data: &SarData, lambda: f64) -> Result<Vec<f64>> {
    Ok(concentrate(data, lambda)?.beta)
}

/// σ̂²(λ) = ‖SᵀSy - SᵀXβ̂(λ)‖² / tr(SᵀS)
pub fn sigma2_hat_given_lambda(data: &SarData, lambda: f64) -> Result<f64> {
    Ok(concentrate(data, lambda)?.sigma2())
}

/// D_n^c(λ) = -tr²(SᵀS) / (2 yᵀSᵀS Q_X(λ) SᵀSy), computed with sparse products in O(nnz·p).
pub fn concentrated_objective(data: &SarData, lambda: f64) -> Result<f64> {
    Ok(concentrate(data, lambda)?.objective())
}

/// Precomputed Wy, Wᵀy, WᵀWy and WᵀX so that each λ costs O(np).
pub struct QsmWorkspace<'a> {
    data: &'a SarData,
    wy_sym: Vec<f64>,
    wtwy: Vec<f64>,
    wtx: DenseMatrix,
}

impl<'a> QsmWorkspace<'a> {
    pub fn new(data: &'a SarData) -> Self {
        let w = data.weights();
        let wy = w.apply(data.y());
        let wty = w.apply_transpose(data.y());
        let wtwy = w.apply_transpose(&wy);
        let wy_sym = wy.iter().zip(&wty).map(|(a, b)| a + b).collect();
        let mut wtx = DenseMatrix::zeros(data.n(), data.p());
        for j in 0..data.p() {
            wtx.col_mut(j).copy_from_slice(&w.apply_transpose(data.x().col(j)));
        }
        Self { data, wy_sym, wtwy, wtx }
    }

    fn eval(&self, lambda: f64) -> Result<Concentrated> {
        let y = self.data.y();
        let l2 = lambda * lambda;
        let v: Vec<f64> = (0..y.len()).map(|i| y[i] - lambda * self.wy_sym[i] + l2 * self.wtwy[i]).collect();
        let x = self.data.x();
        let mut z = x.clone();
        for (zi, wi) in z.as_mut_slice().iter_mut().zip(self.wtx.as_slice()) {
            *zi -= lambda * wi;
        }
        weighted_ls(&z, &v, trace_sts(lambda, self.data.n(), self.data.traces()), lambda)
    }

    pub fn objective(&self, lambda: f64) -> Result<f64> {
        Ok(self.eval(lambda)?.objective())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QsmProfile {
    pub lambda_grid: Vec<f64>,
    /// NaN marks grid points where the weighted Gram matrix was singular.
    pub objective_values: Vec<f64>,
    pub argmin_lambda: f64,
    pub min_objective: f64,
    /// (λ, D_n^c(λ)) at each refinement evaluation.
    pub optimizer_trace: Vec<(f64, f64)>,
    pub iterations: usize,
    pub converged: bool,
}

/// Grid search plus Brent refinement of D_n^c over Λ.
pub fn qsm_profile(data: &SarData, opts: &FitOptions) -> Result<QsmProfile> {
    let ws = QsmWorkspace::new(data);
    let (lo, hi) = opts.lambda_bounds;
    let m = grid_then_brent(&mut |l| ws.objective(l), lo, hi, &opts.search)?;
    Ok(QsmProfile {
        lambda_grid: m.grid,
        objective_values: m.grid_values,
        argmin_lambda: m.x,
        min_objective: m.fx,
        optimizer_trace: m.trace,
        iterations: m.iterations,
        converged: m.converged,
    })
}

/// λ̂ = argmin D_n^c over Λ, then β̂ = β̂(λ̂), σ̂² = σ̂²(λ̂).
pub fn fit_qsm(data: &SarData, opts: &FitOptions) -> Result<FitReport> {
    let start = Instant::now();
    let profile = qsm_profile(data, opts)?;
    let c = QsmWorkspace::new(data).eval(profile.argmin_lambda)?;
    let theta = ParamVector::new(profile.argmin_lambda, c.beta.clone(), c.sigma2());
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    let mut report = FitReport::new(Method::Qsm, theta, data.param_names(), data.n(), elapsed);
    report.note("objective", profile.min_objective);
    report.note("iterations", profile.iterations);
    report.note("converged", profile.converged);
    report.note("grid_failures", profile.objective_values.iter().filter(|v| v.is_nan()).count());
    let (lo, hi) = opts.lambda_bounds;
    if (profile.argmin_lambda - lo).abs() < 1e-6 || (hi - profile.argmin_lambda).abs() < 1e-6 {
        report.note("lambda_at_boundary", true);
    }
    if opts.inference {
        inference::attach_qsm_inference(data, &mut report, &opts.inference_opts);
    }
    Ok(report)
}

/// β̃(λ̂) = (XᵀX)⁻¹XᵀS(λ̂)y and σ̃²(λ̂) = ‖M_X S(λ̂)y‖²/n.
pub fn fit_improved(data: &SarData, lambda_hat: f64) -> Result<FitReport> {
    fit_improved_with(data, lambda_hat, &FitOptions::default())
}

pub fn fit_improved_with(data: &SarData, lambda_hat: f64, opts: &FitOptions) -> Result<FitReport> {
    let start = Instant::now();
    check_lambda(lambda_hat, opts.lambda_bounds)?;
    let beta = qmle::beta_tilde_given_lambda(data, lambda_hat)?;
    let sigma2 = qmle::sigma2_tilde_given_lambda(data, lambda_hat)?;
    let theta = ParamVector::new(lambda_hat, beta, sigma2);
    let elapsed = start.elapsed().as_secs_f64() * 1e3;
    let mut report = FitReport::new(Method::QsmImproved, theta, data.param_names(), data.n(), elapsed);
    if opts.inference {
        inference::attach_improved_inference(data, &mut report, &opts.inference_opts);
    }
    Ok(report)
}

/// ∂D_n/∂θ = (εᵀA_jε + b_jᵀε - σ² tr A_j)_j with ε = S(λ)y - Xβ.
/// Only A₁ (λ) and A_{p+2} (σ²) are nonzero; the β rows are purely linear.
pub struct ScoreDecomposition<'a> {
    op: ShiftOperator<'a>,
    theta: ParamVector,
    /// S Sᵀ
    p_mat: CsrMatrix,
    /// S Wᵀ
    l_mat: CsrMatrix,
    /// n × (p+2); last column zero.
    b: DenseMatrix,
    tr_stw: f64,
    tr_sst: f64,
}

impl<'a> ScoreDecomposition<'a> {
    pub fn new(data: &'a SarData, theta: &ParamVector) -> Result<Self> {
        if !(theta.sigma2 > 0.0) {
            return Err(SarError::InvalidInput("sigma2 must be positive".into()));
        }
        if theta.beta.len() != data.p() {
            return Err(SarError::Dimension("β length".into()));
        }
        let op = data.shift(theta.lambda)?;
        let s = op.to_csr();
        let st = s.transpose();
        let p_mat = s.matmul(&st)?;
        let l_mat = s.matmul(data.weights().csr_transpose())?;
        let (n, p) = (data.n(), data.p());
        let s4 = theta.sigma2 * theta.sigma2;
        let xb = data.x().matvec(&theta.beta)?;
        let g = data.weights().apply(&solve_or_singular(&op, &xb)?);
        let mut b = DenseMatrix::zeros(n, p + 2);
        let pg = p_mat.matvec(&g);
        for i in 0..n {
            b[(i, 0)] = -pg[i] / s4;
        }
        for j in 0..p {
            let px = p_mat.matvec(data.x().col(j));
            for i in 0..n {
                b[(i, j + 1)] = -px[i] / s4;
            }
        }
        let tc = data.traces();
        let tr_stw = tc.tr_w - theta.lambda * tc.frob_w_sq;
        let tr_sst = trace_sts(theta.lambda, n, tc);
        Ok(Self { op, theta: theta.clone(), p_mat, l_mat, b, tr_stw, tr_sst })
    }

    pub fn b(&self) -> &DenseMatrix {
        &self.b
    }

    /// A₁ x = -([S SᵀW S⁻¹]_s + [S Wᵀ]_s) x / σ⁴
    pub fn a1_apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let w = self.op.weights();
        let s4 = self.theta.sigma2 * self.theta.sigma2;
        let k_x = self.p_mat.matvec(&w.apply(&solve_or_singular(&self.op, x)?));
        let kt_x = solve_t_or_singular(&self.op, &w.apply_transpose(&self.p_mat.matvec(x)))?;
        let l_x = self.l_mat.matvec(x);
        let lt_x = w.apply(&self.op.apply_t(x));
        Ok((0..x.len()).map(|i| -0.5 * (k_x[i] + kt_x[i] + l_x[i] + lt_x[i]) / s4).collect())
    }

    /// A_{p+2} = -S Sᵀ / σ⁶
    pub fn a_last(&self) -> CsrMatrix {
        self.p_mat.scale(-1.0 / self.theta.sigma2.powi(3))
    }

    /// tr A₁ = -2 tr(SᵀW)/σ⁴
    pub fn trace_a1(&self) -> f64 {
        -2.0 * self.tr_stw / self.theta.sigma2.powi(2)
    }

    /// tr A_{p+2} = -tr(SSᵀ)/σ⁶
    pub fn trace_a_last(&self) -> f64 {
        -self.tr_sst / self.theta.sigma2.powi(3)
    }

    pub fn score(&self, eps: &[f64]) -> Result<Vec<f64>> {
        let q = self.b.ncols();
        let s2 = self.theta.sigma2;
        let mut out: Vec<f64> = self.b.tr_matvec(eps)?;
        out[0] += dot(eps, &self.a1_apply(eps)?) - s2 * self.trace_a1();
        out[q - 1] += self.a_last().quad_form(eps) - s2 * self.trace_a_last();
        Ok(out)
    }

    /// The decomposition as a linear-quadratic form with A₁ materialised densely.
    pub fn to_lq_form(&self) -> Result<LqForm> {
        let n = self.op.n();
        let q = self.b.ncols();
        let mut a1 = DenseMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            a1.col_mut(j).copy_from_slice(&self.a1_apply(&e)?);
            e[j] = 0.0;
        }
        let mut mats = vec![LqMatrix::Dense(a1)];
        mats.extend((1..q - 1).map(|_| LqMatrix::Zero(n)));
        mats.push(LqMatrix::Sparse(self.a_last()));
        LqForm::new(mats, self.b.clone())
    }
}

fn solve_or_singular(op: &ShiftOperator<'_>, b: &[f64]) -> Result<Vec<f64>> {
    solve_shift(op, b, false).map_err(|e| match e {
        SarError::SolveFailed { lambda, .. } => SarError::SingularShift { lambda },
        other => other,
    })
}

fn solve_t_or_singular(op: &ShiftOperator<'_>, b: &[f64]) -> Result<Vec<f64>> {
    solve_shift(op, b, true).map_err(|e| match e {
        SarError::SolveFailed { lambda, .. } => SarError::SingularShift { lambda },
        other => other,
    })
}

/// Analytic ∂D_n/∂θ at any θ, assembled from the score decomposition with ε̂ = S(λ)y - Xβ.
pub fn score_at(data: &SarData, theta: &ParamVector) -> Result<Vec<f64>> {
    let eps = residuals(data, theta)?;
    ScoreDecomposition::new(data, theta)?.score(&eps)
}
