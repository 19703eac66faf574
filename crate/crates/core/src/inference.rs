//! Plug-in asymptotic covariances for the QSM, improved and QML estimators.
//!
//! Every block is assembled from a small set of traces, diagonals and vectors that depend on
//! λ (and on β through g = G X β), with G = W S⁻¹, P = S Sᵀ, K = P G, L = S Wᵀ and
//! H = [K + L]_s. Traces free of S⁻¹ are always exact sparse computations. The S⁻¹-bearing
//! ones come from a dense inverse when n ≤ `n_dense_max` and from Rademacher probes otherwise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SarError};
use crate::linalg::dense::{dot, norm_sq};
use crate::linalg::shift::{solve_shift, DenseShiftFactor, ShiftOperator};
use crate::linalg::trace::{mean_and_se, rademacher};
use crate::linalg::{CsrMatrix, DenseMatrix};
use crate::lqform::MomentDiagonals;
use crate::model::{residuals, ParamVector, SarData};
use crate::report::FitReport;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceOptions {
    pub n_dense_max: usize,
    pub probes: usize,
    pub seed: u64,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self { n_dense_max: 2000, probes: 200, seed: 20_240_601 }
    }
}

/// Homoskedastic plug-ins: m2 = σ̂², m3 = mean(ε̂³), m4 = mean(ε̂⁴) with ε̂ = S(λ̂)y - Xβ̂.
pub fn moment_plugins(data: &SarData, theta_hat: &ParamVector) -> Result<MomentDiagonals> {
    let e = residuals(data, theta_hat)?;
    let n = e.len() as f64;
    let m3 = e.iter().map(|v| v.powi(3)).sum::<f64>() / n;
    let m4 = e.iter().map(|v| v.powi(4)).sum::<f64>() / n;
    MomentDiagonals::homoskedastic(e.len(), theta_hat.sigma2, m3, m4)
}

/// Quantities at a fixed λ from which all blocks are assembled.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ShiftPrimitives {
    pub lambda: f64,
    pub stochastic: bool,
    /// tr(SᵀW SᵀW)
    pub t1: f64,
    /// ‖W Sᵀ‖²_F
    pub t2: f64,
    /// tr(Kᵀ L)
    pub t3: f64,
    /// ‖Sᵀ W‖²_F
    pub t4: f64,
    /// ‖K‖²_F
    pub t5: f64,
    /// tr(Wᵀ W)
    pub tr_wtw: f64,
    /// tr(W Sᵀ G)
    pub u1: f64,
    /// ‖Sᵀ G‖²_F
    pub u2: f64,
    /// tr(G G)
    pub tr_gg: f64,
    /// ‖G‖²_F
    pub frob_g: f64,
    /// tr(G)
    pub tr_g: f64,
    /// tr(S Wᵀ)
    pub tr_swt: f64,
    /// tr(P)
    pub tr_p: f64,
    /// tr(P²)
    pub tr_p2: f64,
    /// tr(SᵀS SᵀW)
    pub tr_stsstw: f64,
    /// diag(H) = diag(K) + diag(L)
    pub diag_h: Vec<f64>,
    pub diag_g: Vec<f64>,
    pub diag_p: Vec<f64>,
    /// Monte Carlo standard errors of the probed traces, keyed by name; empty when exact.
    pub trace_std_errors: Vec<(String, f64)>,
    #[serde(skip)]
    sinv: Option<DenseMatrix>,
    #[serde(skip)]
    p_mat: Option<CsrMatrix>,
}

impl ShiftPrimitives {
    pub fn new(data: &SarData, lambda: f64, opts: &InferenceOptions) -> Result<Self> {
        if data.n() <= opts.n_dense_max {
            Self::exact(data, lambda)
        } else {
            Self::stochastic(data, lambda, opts.probes, opts.seed)
        }
    }

    fn sparse_part(data: &SarData, lambda: f64) -> Result<(Self, CsrMatrix, CsrMatrix)> {
        let op = data.shift(lambda)?;
        let w = data.weights();
        let s = op.to_csr();
        let st = s.transpose();
        let p_mat = s.matmul(&st)?;
        let l_mat = s.matmul(w.csr_transpose())?;
        let stw = st.matmul(w.csr())?;
        let sts = st.matmul(&s)?;
        let prims = Self {
            lambda,
            stochastic: false,
            t1: stw.trace_of_product(&stw),
            t2: l_mat.frobenius_sq(),
            t3: 0.0,
            t4: stw.frobenius_sq(),
            t5: 0.0,
            tr_wtw: w.csr().frobenius_sq(),
            u1: 0.0,
            u2: 0.0,
            tr_gg: 0.0,
            frob_g: 0.0,
            tr_g: 0.0,
            tr_swt: l_mat.trace(),
            tr_p: p_mat.trace(),
            tr_p2: p_mat.trace_of_product(&p_mat),
            tr_stsstw: sts.trace_of_product(&stw),
            diag_h: l_mat.diag(),
            diag_g: Vec::new(),
            diag_p: p_mat.diag(),
            trace_std_errors: Vec::new(),
            sinv: None,
            p_mat: None,
        };
        Ok((prims, p_mat, l_mat))
    }

    /// All S⁻¹-bearing terms from a dense inverse.
    pub fn exact(data: &SarData, lambda: f64) -> Result<Self> {
        let (mut pr, p_mat, l_mat) = Self::sparse_part(data, lambda)?;
        let op = data.shift(lambda)?;
        let sinv = DenseShiftFactor::new(&op)?.inverse();
        let g = data.weights().csr().mul_dense(&sinv)?;
        let k = p_mat.mul_dense(&g)?;
        let stg = op.to_csr().transpose().mul_dense(&g)?;
        let n = data.n();
        pr.t3 = l_mat.inner_dense(&k);
        pr.t5 = k.frobenius_sq();
        pr.u1 = l_mat.inner_dense(&g);
        pr.u2 = stg.frobenius_sq();
        let mut tr_gg = 0.0;
        for j in 0..n {
            for i in 0..n {
                tr_gg += g[(i, j)] * g[(j, i)];
            }
        }
        pr.tr_gg = tr_gg;
        pr.frob_g = g.frobenius_sq();
        pr.tr_g = g.trace();
        for (h, kd) in pr.diag_h.iter_mut().zip(k.diag()) {
            *h += kd;
        }
        pr.diag_g = g.diag();
        pr.sinv = Some(sinv);
        pr.p_mat = Some(p_mat);
        Ok(pr)
    }

    /// S⁻¹-bearing traces and diagonals by Hutchinson estimators; two solves per probe.
    pub fn stochastic(data: &SarData, lambda: f64, probes: usize, seed: u64) -> Result<Self> {
        let (mut pr, p_mat, l_mat) = Self::sparse_part(data, lambda)?;
        let op = data.shift(lambda)?;
        let w = data.weights();
        let n = data.n();
        let probes = probes.max(2);
        let samples: Vec<Result<ProbeSample>> = (0..probes)
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(k as u64);
                let z = rademacher(&mut rng, n);
                let gz = w.apply(&solve_shift(&op, &z, false)?);
                let kz = p_mat.matvec(&gz);
                let lz = l_mat.matvec(&z);
                let stgz = op.apply_t(&gz);
                let ggz = w.apply(&solve_shift(&op, &gz, false)?);
                Ok(ProbeSample {
                    scalars: [
                        dot(&kz, &lz),
                        norm_sq(&kz),
                        dot(&w.apply_transpose(&z), &stgz),
                        norm_sq(&stgz),
                        dot(&z, &ggz),
                        norm_sq(&gz),
                        dot(&z, &gz),
                    ],
                    diag_k: z.iter().zip(&kz).map(|(a, b)| a * b).collect(),
                    diag_g: z.iter().zip(&gz).map(|(a, b)| a * b).collect(),
                })
            })
            .collect();
        let samples = samples.into_iter().collect::<Result<Vec<_>>>()?;
        let names = ["t3", "t5", "u1", "u2", "tr_gg", "frob_g", "tr_g"];
        let mut est = [0.0; 7];
        for (m, name) in names.iter().enumerate() {
            let xs: Vec<f64> = samples.iter().map(|s| s.scalars[m]).collect();
            let (mean, se) = mean_and_se(&xs);
            est[m] = mean;
            pr.trace_std_errors.push((name.to_string(), se));
        }
        [pr.t3, pr.t5, pr.u1, pr.u2, pr.tr_gg, pr.frob_g, pr.tr_g] = est;
        let mut dk = vec![0.0; n];
        let mut dg = vec![0.0; n];
        for s in &samples {
            for i in 0..n {
                dk[i] += s.diag_k[i];
                dg[i] += s.diag_g[i];
            }
        }
        let kf = samples.len() as f64;
        for (h, k) in pr.diag_h.iter_mut().zip(&dk) {
            *h += k / kf;
        }
        pr.diag_g = dg.into_iter().map(|v| v / kf).collect();
        pr.stochastic = true;
        pr.p_mat = Some(p_mat);
        Ok(pr)
    }

    fn op<'a>(&self, data: &'a SarData) -> Result<ShiftOperator<'a>> {
        data.shift(self.lambda)
    }

    fn p_mat(&self, data: &SarData) -> Result<CsrMatrix> {
        match &self.p_mat {
            Some(p) => Ok(p.clone()),
            None => {
                let s = self.op(data)?.to_csr();
                s.matmul(&s.transpose())
            }
        }
    }

    /// g = W S⁻¹ X β
    pub fn g(&self, data: &SarData, beta: &[f64]) -> Result<Vec<f64>> {
        let xb = data.x().matvec(beta)?;
        let u = match &self.sinv {
            Some(s) => s.matvec(&xb)?,
            None => solve_shift(&self.op(data)?, &xb, false)?,
        };
        Ok(data.weights().apply(&u))
    }
}

struct ProbeSample {
    scalars: [f64; 7],
    diag_k: Vec<f64>,
    diag_g: Vec<f64>,
}

/// Vectors that depend on β and σ² as well as λ.
struct Vectors {
    g: Vec<f64>,
    pg: Vec<f64>,
    stg: Vec<f64>,
    px: DenseMatrix,
}

impl Vectors {
    fn new(data: &SarData, prims: &ShiftPrimitives, beta: &[f64]) -> Result<Self> {
        let p_mat = prims.p_mat(data)?;
        let g = prims.g(data, beta)?;
        let pg = p_mat.matvec(&g);
        let stg = prims.op(data)?.apply_t(&g);
        let px = p_mat.mul_dense(data.x())?;
        Ok(Self { g, pg, stg, px })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AsymptoticCovariances {
    pub v_s: DenseMatrix,
    pub omega_s: DenseMatrix,
    pub u_s: DenseMatrix,
    pub v_m: Option<DenseMatrix>,
    pub omega_m: Option<DenseMatrix>,
    pub v_sm: Option<DenseMatrix>,
    pub omega_sm: Option<DenseMatrix>,
    pub xi: Option<DenseMatrix>,
    pub sandwich_qsm: Option<DenseMatrix>,
    pub sandwich_improved: Option<DenseMatrix>,
}

fn sum3(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    a.iter().zip(b).zip(c).map(|((x, y), z)| x * y * z).sum()
}

fn sum2(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b)
}

fn sym_set(m: &mut DenseMatrix, i: usize, j: usize, v: f64) {
    m[(i, j)] = v;
    m[(j, i)] = v;
}

/// Υ⁽³⁾ and Υ⁽⁴⁾ diagonals: m3 and m4 - 3m2².
fn upsilons(moms: &MomentDiagonals, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if moms.n() != n {
        return Err(SarError::Dimension("moment diagonals do not match n".into()));
    }
    Ok((moms.m3.clone(), moms.excess4()))
}

/// V_S, Ω_S and U_S at θ.
pub fn qsm_blocks(
    data: &SarData,
    theta: &ParamVector,
    moms: &MomentDiagonals,
    prims: &ShiftPrimitives,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix)> {
    let vecs = Vectors::new(data, prims, &theta.beta)?;
    qsm_blocks_with(data, theta, moms, prims, &vecs)
}

fn qsm_blocks_with(
    data: &SarData,
    theta: &ParamVector,
    moms: &MomentDiagonals,
    pr: &ShiftPrimitives,
    v: &Vectors,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix)> {
    let (n, p) = (data.n(), data.p());
    let q = p + 2;
    let s = q - 1;
    let nf = n as f64;
    let s2 = theta.sigma2;
    let sp = |k: i32| s2.powi(k);
    let (u3, u4) = upsilons(moms, n)?;
    let x = data.x();
    let h = &pr.diag_h;
    let pd = &pr.diag_p;

    let mut vs = DenseMatrix::zeros(q, q);
    vs[(0, 0)] = (2.0 * pr.t1 + pr.t2 + 2.0 * pr.t3 + 2.0 * pr.t4 + pr.t5) / (nf * sp(2)) + norm_sq(&v.pg) / (nf * sp(3));
    for j in 0..p {
        sym_set(&mut vs, j + 1, 0, dot(v.px.col(j), &v.pg) / (nf * sp(3)));
        for k in j..p {
            sym_set(&mut vs, j + 1, k + 1, dot(v.px.col(j), v.px.col(k)) / (nf * sp(3)));
        }
    }
    sym_set(&mut vs, 0, s, 4.0 * pr.tr_stsstw / (nf * sp(3)));
    vs[(s, s)] = 2.0 * pr.tr_p2 / (nf * sp(4));

    let mut om = DenseMatrix::zeros(q, q);
    om[(0, 0)] = (sum3(&u4, h, h) + 2.0 * sum3(&u3, &v.pg, h)) / (nf * sp(4));
    for j in 0..p {
        sym_set(&mut om, j + 1, 0, sum3(&u3, v.px.col(j), h) / (nf * sp(4)));
        sym_set(&mut om, j + 1, s, sum3(&u3, v.px.col(j), pd) / (nf * sp(5)));
    }
    sym_set(&mut om, s, 0, (sum3(&u4, pd, h) + sum3(&u3, &v.pg, pd)) / (nf * sp(5)));
    om[(s, s)] = sum3(&u4, pd, pd) / (nf * sp(6));

    let mut us = DenseMatrix::zeros(q, q);
    us[(0, 0)] = (pr.tr_wtw + 2.0 * pr.u1 + pr.u2) / (nf * s2) + norm_sq(&v.stg) / (nf * sp(2));
    for j in 0..p {
        sym_set(&mut us, j + 1, 0, dot(x.col(j), &v.pg) / (nf * sp(2)));
        for k in j..p {
            sym_set(&mut us, j + 1, k + 1, dot(x.col(j), v.px.col(k)) / (nf * sp(2)));
        }
    }
    sym_set(&mut us, 0, s, 2.0 * pr.tr_swt / (nf * sp(2)));
    us[(s, s)] = pr.tr_p / (nf * sp(3));
    Ok((vs, om, us))
}

/// V_M, Ω_M, V_SM and Ω_SM at θ; rows of the cross blocks index the QSM score.
fn cross_blocks_with(
    data: &SarData,
    theta: &ParamVector,
    moms: &MomentDiagonals,
    pr: &ShiftPrimitives,
    v: &Vectors,
    u_s: &DenseMatrix,
) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix, DenseMatrix)> {
    let (n, p) = (data.n(), data.p());
    let q = p + 2;
    let s = q - 1;
    let nf = n as f64;
    let s2 = theta.sigma2;
    let sp = |k: i32| s2.powi(k);
    let (u3, u4) = upsilons(moms, n)?;
    let x = data.x();
    let gd = &pr.diag_g;
    let h = &pr.diag_h;
    let pd = &pr.diag_p;
    let ones = vec![1.0; n];

    let mut vm = DenseMatrix::zeros(q, q);
    vm[(0, 0)] = (pr.tr_gg + pr.frob_g) / nf + norm_sq(&v.g) / (nf * s2);
    for j in 0..p {
        sym_set(&mut vm, j + 1, 0, dot(x.col(j), &v.g) / (nf * s2));
        for k in j..p {
            sym_set(&mut vm, j + 1, k + 1, dot(x.col(j), x.col(k)) / (nf * s2));
        }
    }
    sym_set(&mut vm, s, 0, pr.tr_g / (nf * s2));
    vm[(s, s)] = 1.0 / (2.0 * sp(2));

    let mut om = DenseMatrix::zeros(q, q);
    om[(0, 0)] = (sum3(&u4, gd, gd) + 2.0 * sum3(&u3, &v.g, gd)) / (nf * sp(2));
    for j in 0..p {
        sym_set(&mut om, j + 1, 0, sum3(x.col(j), &u3, gd) / (nf * sp(2)));
        sym_set(&mut om, j + 1, s, sum2(x.col(j), &u3) / (2.0 * nf * sp(3)));
    }
    sym_set(&mut om, s, 0, (sum2(&u4, gd) + sum2(&u3, &v.g)) / (2.0 * nf * sp(3)));
    om[(s, s)] = sum2(&u4, &ones) / (4.0 * nf * sp(4));

    let vsm = u_s.clone();

    let mut osm = DenseMatrix::zeros(q, q);
    osm[(0, 0)] = (sum3(&u4, h, gd) + sum3(&u3, &v.pg, gd) + sum3(&u3, h, &v.g)) / (nf * sp(3));
    for k in 0..p {
        osm[(0, k + 1)] = sum3(&u3, h, x.col(k)) / (nf * sp(3));
        osm[(s, k + 1)] = sum3(&u3, pd, x.col(k)) / (nf * sp(4));
    }
    osm[(0, s)] = (sum2(&u4, h) + sum2(&u3, &v.pg)) / (2.0 * nf * sp(4));
    for j in 0..p {
        osm[(j + 1, 0)] = sum3(&u3, v.px.col(j), gd) / (nf * sp(3));
        osm[(j + 1, s)] = sum2(&u3, v.px.col(j)) / (2.0 * nf * sp(4));
    }
    osm[(s, 0)] = (sum3(&u4, pd, gd) + sum3(&u3, pd, &v.g)) / (nf * sp(4));
    osm[(s, s)] = sum2(&u4, pd) / (2.0 * nf * sp(5));
    Ok((vm, om, vsm, osm))
}

fn checked_inverse(m: &DenseMatrix, what: &str) -> Result<DenseMatrix> {
    let inv = m.inverse().map_err(|_| SarError::NotInvertible(what.into()))?;
    if inv.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(SarError::NotInvertible(what.into()));
    }
    Ok(inv)
}

/// A M Aᵀ, symmetrized.
fn congruence(a: &DenseMatrix, m: &DenseMatrix) -> Result<DenseMatrix> {
    a.matmul(m)?.matmul(&a.transpose())?.symmetrized()
}

/// Ξ = [e₁ᵀU_S⁻¹, 0; -V_{M,-λ,-λ}⁻¹V_{M,-λ,λ} e₁ᵀU_S⁻¹, V_{M,-λ,-λ}⁻¹(0, I)].
pub fn xi_matrix(u_s: &DenseMatrix, v_m: &DenseMatrix) -> Result<DenseMatrix> {
    let q = u_s.nrows();
    let us_inv = checked_inverse(u_s, "U_S")?;
    let sub = DenseMatrix::from_fn(q - 1, q - 1, |i, j| v_m[(i + 1, j + 1)]);
    let sub_inv = checked_inverse(&sub, "V_M,-λ,-λ")?;
    let col: Vec<f64> = (0..q - 1).map(|i| v_m[(i + 1, 0)]).collect();
    let c = sub_inv.matvec(&col)?;
    let e1u = us_inv.row(0);
    let mut xi = DenseMatrix::zeros(q, 2 * q);
    for k in 0..q {
        xi[(0, k)] = e1u[k];
    }
    for i in 0..q - 1 {
        for k in 0..q {
            xi[(i + 1, k)] = -c[i] * e1u[k];
        }
        for k in 0..q - 1 {
            xi[(i + 1, q + 1 + k)] = sub_inv[(i, k)];
        }
    }
    Ok(xi)
}

fn joint(a: &DenseMatrix, b: &DenseMatrix, d: &DenseMatrix) -> DenseMatrix {
    let q = a.nrows();
    DenseMatrix::from_fn(2 * q, 2 * q, |i, j| match (i < q, j < q) {
        (true, true) => a[(i, j)],
        (true, false) => b[(i, j - q)],
        (false, true) => b[(j, i - q)],
        (false, false) => d[(i - q, j - q)],
    })
}

/// U_S⁻¹(V_S + Ω_S)U_S⁻¹ at θ̂.
pub fn qsm_sandwich(
    data: &SarData,
    theta_hat: &ParamVector,
    moms: &MomentDiagonals,
    opts: &InferenceOptions,
) -> Result<AsymptoticCovariances> {
    let prims = ShiftPrimitives::new(data, theta_hat.lambda, opts)?;
    qsm_sandwich_with(data, theta_hat, moms, &prims)
}

pub fn qsm_sandwich_with(
    data: &SarData,
    theta_hat: &ParamVector,
    moms: &MomentDiagonals,
    prims: &ShiftPrimitives,
) -> Result<AsymptoticCovariances> {
    let (v_s, omega_s, u_s) = qsm_blocks(data, theta_hat, moms, prims)?;
    let inv = checked_inverse(&u_s, "U_S")?;
    let sandwich = congruence(&inv, &v_s.add(&omega_s)?)?;
    Ok(AsymptoticCovariances {
        v_s,
        omega_s,
        u_s,
        v_m: None,
        omega_m: None,
        v_sm: None,
        omega_sm: None,
        xi: None,
        sandwich_qsm: Some(sandwich),
        sandwich_improved: None,
    })
}

/// Ξ(V + Ω)Ξᵀ at θ̂̃, with V and Ω the joint covariances of (-∂D, ∂ℓ).
pub fn improved_sandwich(
    data: &SarData,
    theta_tilde_hat: &ParamVector,
    moms: &MomentDiagonals,
    opts: &InferenceOptions,
) -> Result<AsymptoticCovariances> {
    let prims = ShiftPrimitives::new(data, theta_tilde_hat.lambda, opts)?;
    improved_sandwich_with(data, theta_tilde_hat, moms, &prims)
}

pub fn improved_sandwich_with(
    data: &SarData,
    theta: &ParamVector,
    moms: &MomentDiagonals,
    prims: &ShiftPrimitives,
) -> Result<AsymptoticCovariances> {
    let vecs = Vectors::new(data, prims, &theta.beta)?;
    let (v_s, omega_s, u_s) = qsm_blocks_with(data, theta, moms, prims, &vecs)?;
    let (v_m, omega_m, v_sm, omega_sm) = cross_blocks_with(data, theta, moms, prims, &vecs, &u_s)?;
    let us_inv = checked_inverse(&u_s, "U_S")?;
    let sandwich_qsm = congruence(&us_inv, &v_s.add(&omega_s)?)?;
    let xi = xi_matrix(&u_s, &v_m)?;
    let total = joint(&v_s, &v_sm, &v_m).add(&joint(&omega_s, &omega_sm, &omega_m))?;
    let sandwich_improved = congruence(&xi, &total)?;
    Ok(AsymptoticCovariances {
        v_s,
        omega_s,
        u_s,
        v_m: Some(v_m),
        omega_m: Some(omega_m),
        v_sm: Some(v_sm),
        omega_sm: Some(omega_sm),
        xi: Some(xi),
        sandwich_qsm: Some(sandwich_qsm),
        sandwich_improved: Some(sandwich_improved),
    })
}

/// V_M⁻¹(V_M + Ω_M)V_M⁻¹ at the QMLE.
pub fn qmle_sandwich(
    data: &SarData,
    theta_tilde: &ParamVector,
    moms: &MomentDiagonals,
    opts: &InferenceOptions,
) -> Result<DenseMatrix> {
    let prims = ShiftPrimitives::new(data, theta_tilde.lambda, opts)?;
    let vecs = Vectors::new(data, &prims, &theta_tilde.beta)?;
    let (_, _, u_s) = qsm_blocks_with(data, theta_tilde, moms, &prims, &vecs)?;
    let (v_m, omega_m, _, _) = cross_blocks_with(data, theta_tilde, moms, &prims, &vecs, &u_s)?;
    let inv = checked_inverse(&v_m, "V_M")?;
    congruence(&inv, &v_m.add(&omega_m)?)
}

fn note_mode(report: &mut FitReport, n: usize, opts: &InferenceOptions) {
    if n > opts.n_dense_max {
        report.note("trace_mode", format!("stochastic({} probes)", opts.probes));
    } else {
        report.note("trace_mode", "exact_dense");
    }
}

fn attach(report: &mut FitReport, cov: Result<DenseMatrix>) {
    match cov {
        Ok(c) => report.attach_covariance(c),
        Err(e) => report.note("inference_error", e.to_string()),
    }
}

/// Sandwich covariance for a QSM fit; failures are recorded in diagnostics.
pub fn attach_qsm_inference(data: &SarData, report: &mut FitReport, opts: &InferenceOptions) {
    let cov = moment_plugins(data, &report.theta)
        .and_then(|m| qsm_sandwich(data, &report.theta, &m, opts))
        .and_then(|a| a.sandwich_qsm.ok_or(SarError::NotInvertible("U_S".into())));
    note_mode(report, data.n(), opts);
    attach(report, cov);
}

pub fn attach_improved_inference(data: &SarData, report: &mut FitReport, opts: &InferenceOptions) {
    let cov = moment_plugins(data, &report.theta)
        .and_then(|m| improved_sandwich(data, &report.theta, &m, opts))
        .and_then(|a| a.sandwich_improved.ok_or(SarError::NotInvertible("Ξ".into())));
    note_mode(report, data.n(), opts);
    attach(report, cov);
}

pub fn attach_qmle_inference(data: &SarData, report: &mut FitReport, opts: &InferenceOptions) {
    let cov = moment_plugins(data, &report.theta).and_then(|m| qmle_sandwich(data, &report.theta, &m, opts));
    note_mode(report, data.n(), opts);
    attach(report, cov);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lqform::{lq_cov_parts, LqForm, LqMatrix};
    use crate::model::{simulate_sar, ErrorDistribution};
    use crate::netgen::gen_bernoulli;

    fn instance(n: usize, seed: u64, err: &ErrorDistribution) -> SarData {
        let w = gen_bernoulli(n, 5.0 / n as f64, seed).unwrap().row_normalize().weights;
        let x = DenseMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { ((i as f64 + 0.5) * 1.37 + seed as f64).sin() * 1.4 });
        simulate_sar(&ParamVector::new(0.3, vec![2.0, 1.0], 1.0), &x, &w, err, seed).unwrap()
    }

    /// The joint score (-∂D, ∂ℓ) as one linear-quadratic form, built from dense matrices.
    fn joint_form(data: &SarData, t: &ParamVector) -> LqForm {
        let n = data.n();
        let p = data.p();
        let s = data.shift(t.lambda).unwrap().to_dense();
        let w = data.weights().to_dense();
        let sinv = s.inverse().unwrap();
        let g = w.matmul(&sinv).unwrap();
        let pm = s.matmul(&s.transpose()).unwrap();
        let k = pm.matmul(&g).unwrap();
        let l = s.matmul(&w.transpose()).unwrap();
        let hm = k.add(&l).unwrap();
        let gv = g.matvec(&data.x().matvec(&t.beta).unwrap()).unwrap();
        let s2 = t.sigma2;
        let mut a = vec![LqMatrix::Dense(hm.scale(1.0 / (s2 * s2)))];
        a.extend((0..p).map(|_| LqMatrix::Zero(n)));
        a.push(LqMatrix::Dense(pm.scale(1.0 / s2.powi(3))));
        a.push(LqMatrix::Dense(g.scale(1.0 / s2)));
        a.extend((0..p).map(|_| LqMatrix::Zero(n)));
        a.push(LqMatrix::Dense(DenseMatrix::identity(n).scale(0.5 / (s2 * s2))));
        let q = p + 2;
        let pg = pm.matvec(&gv).unwrap();
        let px = pm.matmul(data.x()).unwrap();
        let b = DenseMatrix::from_fn(n, 2 * q, |i, j| match j {
            0 => pg[i] / (s2 * s2),
            j if j <= p => px[(i, j - 1)] / (s2 * s2),
            j if j == q => gv[i] / s2,
            j if j > q && j <= q + p => data.x()[(i, j - q - 1)] / s2,
            _ => 0.0,
        });
        LqForm::new(a, b).unwrap()
    }

    #[test]
    fn blocks_equal_joint_form_moments() {
        let err = ErrorDistribution::contaminated_normal();
        for seed in 0..3 {
            let d = instance(30, seed, &err);
            let t = ParamVector::new(0.25, vec![1.9, 1.1], 0.9);
            let moms = MomentDiagonals::homoskedastic(30, 0.9, 0.3, 5.0).unwrap();
            let a = improved_sandwich(&d, &t, &moms, &InferenceOptions::default()).unwrap();
            let (g, e) = lq_cov_parts(&joint_form(&d, &t), &moms).unwrap();
            let v = joint(&a.v_s, a.v_sm.as_ref().unwrap(), a.v_m.as_ref().unwrap()).scale(30.0);
            let o = joint(&a.omega_s, a.omega_sm.as_ref().unwrap(), a.omega_m.as_ref().unwrap()).scale(30.0);
            assert!(v.sub(&g).unwrap().max_abs() < 1e-9 * g.max_abs(), "{}", v.sub(&g).unwrap().max_abs());
            assert!(o.sub(&e).unwrap().max_abs() < 1e-9 * e.max_abs().max(1.0));
        }
    }

    #[test]
    fn normal_moments_zero_the_omegas() {
        let d = instance(25, 4, &ErrorDistribution::StandardNormal);
        let t = ParamVector::new(0.3, vec![2.0, 1.0], 1.2);
        let moms = MomentDiagonals::homoskedastic(25, 1.2, 0.0, 3.0 * 1.44).unwrap();
        let a = improved_sandwich(&d, &t, &moms, &InferenceOptions::default()).unwrap();
        assert!(a.omega_s.max_abs() < 1e-15);
        assert!(a.omega_m.unwrap().max_abs() < 1e-15);
        assert!(a.omega_sm.unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn symmetric_blocks_and_psd_sandwich() {
        let d = instance(40, 5, &ErrorDistribution::contaminated_normal());
        let t = ParamVector::new(0.3, vec![2.0, 1.0], 1.0);
        let moms = moment_plugins(&d, &t).unwrap();
        let a = improved_sandwich(&d, &t, &moms, &InferenceOptions::default()).unwrap();
        for m in [&a.v_s, &a.u_s, a.sandwich_qsm.as_ref().unwrap(), a.sandwich_improved.as_ref().unwrap()] {
            assert!(m.sub(&m.transpose()).unwrap().max_abs() <= 1e-12 * m.max_abs());
        }
        let eig = a.sandwich_qsm.unwrap().to_faer().self_adjoint_eigenvalues(faer::Side::Lower).unwrap();
        assert!(eig.iter().all(|&v| v > -1e-10));
    }

    #[test]
    fn xi_top_row_is_first_row_of_u_inverse() {
        let d = instance(30, 6, &ErrorDistribution::StandardNormal);
        let t = ParamVector::new(0.3, vec![2.0, 1.0], 1.0);
        let moms = moment_plugins(&d, &t).unwrap();
        let a = improved_sandwich(&d, &t, &moms, &InferenceOptions::default()).unwrap();
        let inv = a.u_s.inverse().unwrap();
        let xi = a.xi.unwrap();
        for k in 0..4 {
            assert!((xi[(0, k)] - inv[(0, k)]).abs() < 1e-14);
            assert_eq!(xi[(0, 4 + k)], 0.0);
        }
    }

    #[test]
    fn constant_residual_moments() {
        let w = crate::linalg::SparseWeights::from_triplets(4, &[]).unwrap();
        let x = DenseMatrix::from_fn(4, 1, |i, _| i as f64 + 1.0);
        let d = SarData::new(vec![3.0, 4.0, 5.0, 6.0], x, w).unwrap();
        let m = moment_plugins(&d, &ParamVector::new(0.0, vec![1.0], 4.0)).unwrap();
        assert!((m.m3[0] - 8.0).abs() < 1e-12 && (m.m4[0] - 16.0).abs() < 1e-12);
    }

    #[test]
    fn stochastic_traces_agree_with_exact() {
        let d = instance(300, 7, &ErrorDistribution::StandardNormal);
        let ex = ShiftPrimitives::exact(&d, 0.4).unwrap();
        let st = ShiftPrimitives::stochastic(&d, 0.4, 200, 9).unwrap();
        let pairs = [("t3", ex.t3, st.t3), ("t5", ex.t5, st.t5), ("u1", ex.u1, st.u1), ("u2", ex.u2, st.u2), ("tr_gg", ex.tr_gg, st.tr_gg), ("frob_g", ex.frob_g, st.frob_g), ("tr_g", ex.tr_g, st.tr_g)];
        for (name, e, s) in pairs {
            let se = st.trace_std_errors.iter().find(|(k, _)| k == name).unwrap().1;
            assert!((e - s).abs() <= 3.0 * se + 1e-9 * e.abs(), "{name}: {e} vs {s} (se {se})");
        }
        assert_eq!(ex.t1, st.t1);
        assert_eq!(ex.tr_p2, st.tr_p2);
    }

    #[test]
    fn qmle_sandwich_under_normality_is_inverse_information() {
        let d = instance(40, 8, &ErrorDistribution::StandardNormal);
        let t = ParamVector::new(0.3, vec![2.0, 1.0], 1.0);
        let moms = MomentDiagonals::homoskedastic(40, 1.0, 0.0, 3.0).unwrap();
        let c = qmle_sandwich(&d, &t, &moms, &InferenceOptions::default()).unwrap();
        let prims = ShiftPrimitives::exact(&d, 0.3).unwrap();
        let vecs = Vectors::new(&d, &prims, &t.beta).unwrap();
        let (_, _, us) = qsm_blocks_with(&d, &t, &moms, &prims, &vecs).unwrap();
        let (vm, _, _, _) = cross_blocks_with(&d, &t, &moms, &prims, &vecs, &us).unwrap();
        let inv = vm.inverse().unwrap();
        assert!(c.sub(&inv).unwrap().max_abs() < 1e-10 * inv.max_abs());
    }
}
