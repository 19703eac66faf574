#![allow(dead_code)]

pub mod transcription;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sarqsm::linalg::{DenseMatrix, SparseWeights};
use sarqsm::lqform::MomentDiagonals;
use sarqsm::model::simulate_response;
use sarqsm::{ErrorDistribution, ParamVector, SarData};

use transcription::Mat;

/// Small instance: row-normalized W with 2 to 4 out-neighbours per row, X = (1, N(0,1), U(-1,1)),
/// mixture errors and heterogeneous third and fourth moments.
pub struct Instance {
    pub data: SarData,
    pub theta: ParamVector,
    pub moms: MomentDiagonals,
}

pub fn random_weights(n: usize, rng: &mut ChaCha8Rng) -> SparseWeights {
    let mut edges = Vec::new();
    for i in 0..n {
        let k = rng.random_range(2..=4usize);
        while edges.iter().filter(|&&(a, _)| a == i).count() < k {
            let j = rng.random_range(0..n);
            if j != i && !edges.contains(&(i, j)) {
                edges.push((i, j));
            }
        }
    }
    SparseWeights::adjacency(n, &edges).unwrap().row_normalize().weights
}

pub fn random_design(n: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let mut x = DenseMatrix::zeros(n, 3);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = rng.sample(StandardNormal);
        x[(i, 2)] = rng.random_range(-1.0..1.0);
    }
    x
}

pub fn instance(n: usize, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random_weights(n, &mut rng);
    let x = random_design(n, &mut rng);
    let theta = ParamVector::new(
        rng.random_range(-0.4..0.6),
        vec![rng.random_range(-2.0..2.0), rng.random_range(0.5..1.5), rng.random_range(-1.0..1.0)],
        rng.random_range(0.5..2.0),
    );
    let y = simulate_response(&w, &x, &theta, &ErrorDistribution::contaminated_normal(), &mut rng).unwrap();
    let s = theta.sigma2;
    let m3: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * s.powf(1.5)).collect();
    let m4: Vec<f64> = (0..n).map(|_| s * s * rng.random_range(1.5..8.0)).collect();
    let moms = MomentDiagonals::new(vec![s; n], m3, m4).unwrap();
    Instance { data: SarData::new(y, x, w).unwrap(), theta, moms }
}

pub fn to_mat(m: &DenseMatrix) -> Mat {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// max |a − b| / max(max|b|, tiny) over all entries.
pub fn rel_err(a: &DenseMatrix, b: &Mat) -> f64 {
    assert_eq!((a.nrows(), a.ncols()), (b.r, b.c));
    let scale = b.v.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut worst: f64 = 0.0;
    for i in 0..b.r {
        for j in 0..b.c {
            worst = worst.max((a[(i, j)] - b[(i, j)]).abs() / scale);
        }
    }
    worst
}

/// Largest relative deviation of each library block from its transcription at `inst`.
pub fn transcription_errors(inst: &Instance) -> Vec<(&'static str, f64)> {
    use sarqsm::inference::{improved_sandwich_with, ShiftPrimitives};
    let d = &inst.data;
    let t = &inst.theta;
    let prims = ShiftPrimitives::exact(d, t.lambda).unwrap();
    let lib = improved_sandwich_with(d, t, &inst.moms, &prims).unwrap();
    let oracle = transcription::blocks(&to_mat(&d.weights().to_dense()), &to_mat(d.x()), t.lambda, &t.beta, t.sigma2, &inst.moms.m3, &inst.moms.m4);
    vec![
        ("V_S", rel_err(&lib.v_s, &oracle.v_s)),
        ("Omega_S", rel_err(&lib.omega_s, &oracle.omega_s)),
        ("U_S", rel_err(&lib.u_s, &oracle.u_s)),
        ("V_M", rel_err(lib.v_m.as_ref().unwrap(), &oracle.v_m)),
        ("Omega_M", rel_err(lib.omega_m.as_ref().unwrap(), &oracle.omega_m)),
        ("V_SM", rel_err(lib.v_sm.as_ref().unwrap(), &oracle.v_sm)),
        ("Omega_SM", rel_err(lib.omega_sm.as_ref().unwrap(), &oracle.omega_sm)),
        ("Xi", rel_err(lib.xi.as_ref().unwrap(), &oracle.xi)),
        ("sandwich_qsm", rel_err(lib.sandwich_qsm.as_ref().unwrap(), &oracle.sandwich_qsm)),
        ("sandwich_improved", rel_err(lib.sandwich_improved.as_ref().unwrap(), &oracle.sandwich_improved)),
    ]
}
