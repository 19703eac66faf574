//! Timing of concentrated-objective evaluations and full fits across sample sizes.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::report::FitOptions;
use crate::simharness::{replication_data, SimDesign, WeightsKind};
use crate::{qmle, qsm};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchOptions {
    pub n_list: Vec<usize>,
    pub weights: WeightsKind,
    pub seed: u64,
    /// QMLE fits are skipped above this n.
    pub qmle_max_n: Option<usize>,
    /// Minimum accumulated seconds per objective timing.
    pub min_seconds: f64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self { n_list: vec![500, 1000, 5000], weights: WeightsKind::Bernoulli, seed: 1, qmle_max_n: None, min_seconds: 0.2 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub nnz: usize,
    /// Seconds per evaluation of D_n^c(λ) inside the optimizer, workspace precomputed.
    pub t_objective: f64,
    /// Seconds per standalone call of concentrated_objective, sparse products included.
    pub t_objective_standalone: f64,
    /// Seconds for fit_qsm plus fit_improved.
    pub t_s: f64,
    pub t_m: Option<f64>,
    pub ratio: Option<f64>,
    /// Checksum of the generated response, identical across runs with the same seed.
    pub data_checksum: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of log t_objective on log n.
    pub objective_slope: Option<f64>,
    pub fit_slope_qsm: Option<f64>,
}

/// Median seconds per call over batches that together take at least `min_seconds`.
fn time_per_call(mut f: impl FnMut() -> Result<()>, min_seconds: f64) -> Result<f64> {
    f()?;
    let mut batch = 1usize;
    loop {
        let start = Instant::now();
        for _ in 0..batch {
            f()?;
        }
        if start.elapsed().as_secs_f64() >= min_seconds / 5.0 {
            break;
        }
        batch *= 2;
    }
    let mut samples = Vec::with_capacity(5);
    for _ in 0..5 {
        let start = Instant::now();
        for _ in 0..batch {
            f()?;
        }
        samples.push(start.elapsed().as_secs_f64() / batch as f64);
    }
    samples.sort_by(f64::total_cmp);
    Ok(samples[2])
}

pub fn log_log_slope(ns: &[usize], ts: &[f64]) -> Option<f64> {
    if ns.len() < 2 || ns.len() != ts.len() || ts.iter().any(|t| !(*t > 0.0)) {
        return None;
    }
    let xs: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = ts.iter().map(|t| t.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        None
    } else {
        Some(sxy / sxx)
    }
}

pub fn run_bench(opts: &BenchOptions) -> Result<BenchReport> {
    let mut rows = Vec::new();
    for &n in &opts.n_list {
        let design = SimDesign { n, weights: opts.weights, base_seed: opts.seed, reps: 1, ..SimDesign::default() };
        let data = replication_data(&design, 0)?;
        let ws = qsm::QsmWorkspace::new(&data);
        let t_objective = time_per_call(
            || {
                ws.objective(0.3)?;
                Ok(())
            },
            opts.min_seconds,
        )?;
        let t_objective_standalone = time_per_call(
            || {
                qsm::concentrated_objective(&data, 0.3)?;
                Ok(())
            },
            opts.min_seconds,
        )?;
        let fit_opts = FitOptions::default();
        let start = Instant::now();
        let q = qsm::fit_qsm(&data, &fit_opts)?;
        qsm::fit_improved_with(&data, q.theta.lambda, &fit_opts)?;
        let t_s = start.elapsed().as_secs_f64();
        let t_m = if opts.qmle_max_n.is_none_or(|m| n <= m) {
            let start = Instant::now();
            qmle::fit_qmle(&data, &fit_opts)?;
            Some(start.elapsed().as_secs_f64())
        } else {
            None
        };
        rows.push(BenchRow {
            n,
            nnz: data.weights().nnz(),
            t_objective,
            t_objective_standalone,
            t_s,
            t_m,
            ratio: t_m.map(|m| m / t_s),
            data_checksum: data.y().iter().enumerate().map(|(i, v)| v * (1.0 + (i % 7) as f64)).sum(),
        });
    }
    let ns: Vec<usize> = rows.iter().map(|r| r.n).collect();
    let objective_slope = log_log_slope(&ns, &rows.iter().map(|r| r.t_objective).collect::<Vec<_>>());
    let fit_slope_qsm = log_log_slope(&ns, &rows.iter().map(|r| r.t_s).collect::<Vec<_>>());
    Ok(BenchReport { rows, objective_slope, fit_slope_qsm })
}

pub fn render_bench(report: &BenchReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>8} {:>8} {:>14} {:>14} {:>12} {:>12} {:>10}", "n", "nnz", "t_obj (s)", "t_call (s)", "t_S (s)", "t_M (s)", "t_M/t_S");
    for r in &report.rows {
        let tm = r.t_m.map_or("-".to_string(), |v| format!("{v:.4}"));
        let ratio = r.ratio.map_or("-".to_string(), |v| format!("{v:.2}"));
        let _ = writeln!(s, "{:>8} {:>8} {:>14.3e} {:>14.3e} {:>12.4} {:>12} {:>10}", r.n, r.nnz, r.t_objective, r.t_objective_standalone, r.t_s, tm, ratio);
    }
    if let Some(b) = report.objective_slope {
        let _ = writeln!(s, "log-log slope of objective cost: {b:.3}");
    }
    if let Some(b) = report.fit_slope_qsm {
        let _ = writeln!(s, "log-log slope of QSM fit time:   {b:.3}");
    }
    s
}
