//! Monte Carlo replication engine: designs, per-replication fits, BIAS/SD/RMSE tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SarError};
use crate::inference::{self, InferenceOptions, ShiftPrimitives};
use crate::linalg::{DenseMatrix, LogDetStrategy, SparseWeights};
use crate::model::{residuals, simulate_response, ErrorDistribution, ParamVector, SarData};
use crate::netgen::{gen_bernoulli, gen_sbm_default};
use crate::report::{FitOptions, Method};
use crate::{qmle, qsm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsKind {
    /// a_ij ~ Bernoulli(5/n)
    Bernoulli,
    /// Five blocks, p_in = n^-0.4, p_out = n^-0.8.
    Sbm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Normal,
    /// 0.9 N(0, 5/9) + 0.1 N(0, 5)
    Mixture,
}

impl ErrorKind {
    pub fn distribution(&self) -> ErrorDistribution {
        match self {
            ErrorKind::Normal => ErrorDistribution::StandardNormal,
            ErrorKind::Mixture => ErrorDistribution::contaminated_normal(),
        }
    }
}

impl std::str::FromStr for WeightsKind {
    type Err = SarError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bernoulli" => Ok(Self::Bernoulli),
            "sbm" => Ok(Self::Sbm),
            other => Err(SarError::InvalidInput(format!("unknown weights kind `{other}`"))),
        }
    }
}

impl std::str::FromStr for ErrorKind {
    type Err = SarError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Self::Normal),
            "mixture" => Ok(Self::Mixture),
            other => Err(SarError::InvalidInput(format!("unknown error kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimDesign {
    pub name: String,
    pub n: usize,
    pub lambda0: f64,
    pub beta0: Vec<f64>,
    pub sigma2_0: f64,
    pub weights: WeightsKind,
    pub errors: ErrorKind,
    pub reps: usize,
    pub base_seed: u64,
    pub estimators: Vec<Method>,
    /// Sandwich standard errors and Wald coverage for the QSM estimators.
    pub inference: bool,
    pub logdet: LogDetStrategy,
}

impl Default for SimDesign {
    fn default() -> Self {
        Self {
            name: "design".into(),
            n: 500,
            lambda0: 0.3,
            beta0: vec![2.0, 1.0],
            sigma2_0: 1.0,
            weights: WeightsKind::Bernoulli,
            errors: ErrorKind::Normal,
            reps: 1000,
            base_seed: 1,
            estimators: Method::ALL.to_vec(),
            inference: false,
            logdet: LogDetStrategy::Auto,
        }
    }
}

impl SimDesign {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| Err(SarError::Config { key: key.into(), reason });
        if self.reps < 1 {
            return bad("reps", "must be at least 1".into());
        }
        if self.n < 10 {
            return bad("n", format!("{} is below the minimum of 10", self.n));
        }
        let (lo, hi) = crate::linalg::shift::DEFAULT_LAMBDA_BOUNDS;
        if !(self.lambda0 > lo && self.lambda0 < hi) {
            return bad("lambda0", format!("{} outside ({lo}, {hi})", self.lambda0));
        }
        if self.beta0.len() != 2 {
            return bad("beta0", "needs two entries: intercept and slope".into());
        }
        if !(self.sigma2_0 > 0.0) {
            return bad("sigma2", "must be positive".into());
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut d = SimDesign::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| SarError::Config {
                key: line.to_string(),
                reason: format!("line {}: expected `key = value`", lineno + 1),
            })?;
            let key = key.trim();
            let value = value.trim();
            let cfg = |reason: String| SarError::Config { key: key.to_string(), reason };
            let num = |v: &str| v.parse::<f64>().map_err(|e| cfg(format!("`{v}`: {e}")));
            match key {
                "name" => d.name = value.to_string(),
                "n" => d.n = value.parse().map_err(|e| cfg(format!("`{value}`: {e}")))?,
                "lambda0" => d.lambda0 = num(value)?,
                "beta0" => d.beta0 = value.split(',').map(|v| num(v.trim())).collect::<Result<_>>()?,
                "sigma2" => d.sigma2_0 = num(value)?,
                "weights" => d.weights = value.parse().map_err(|e: SarError| cfg(e.to_string()))?,
                "errors" => d.errors = value.parse().map_err(|e: SarError| cfg(e.to_string()))?,
                "reps" => d.reps = value.parse().map_err(|e| cfg(format!("`{value}`: {e}")))?,
                "seed" => d.base_seed = value.parse().map_err(|e| cfg(format!("`{value}`: {e}")))?,
                "estimators" => {
                    d.estimators = if value.is_empty() {
                        Vec::new()
                    } else {
                        value
                            .split(',')
                            .map(|v| v.trim().parse::<Method>().map_err(|e| cfg(e.to_string())))
                            .collect::<Result<_>>()?
                    };
                    d.estimators.sort();
                    d.estimators.dedup();
                }
                "inference" => d.inference = value.parse().map_err(|_| cfg(format!("`{value}` is not true/false")))?,
                "logdet" => d.logdet = value.parse().map_err(|e: SarError| cfg(e.to_string()))?,
                other => {
                    return Err(SarError::Config { key: other.to_string(), reason: format!("unknown key on line {}", lineno + 1) })
                }
            }
        }
        d.validate()?;
        Ok(d)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SarError::Io { path: path.display().to_string(), source: e })?;
        Self::parse(&text)
    }

    pub fn theta0(&self) -> ParamVector {
        ParamVector::new(self.lambda0, self.beta0.clone(), self.sigma2_0)
    }

    pub fn has(&self, m: Method) -> bool {
        self.estimators.contains(&m)
    }
}

/// The data of replication `rep`: seed = base_seed + rep, with W, X and ε on separate streams.
pub fn replication_data(design: &SimDesign, rep: usize) -> Result<SarData> {
    let seed = design.base_seed.wrapping_add(rep as u64);
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(k);
        r
    };
    let w_seed: u64 = stream(0).random();
    let adj = match design.weights {
        WeightsKind::Bernoulli => gen_bernoulli(design.n, 5.0 / design.n as f64, w_seed)?,
        WeightsKind::Sbm => gen_sbm_default(design.n, w_seed)?.0,
    };
    let w: SparseWeights = adj.row_normalize().weights;
    let mut xr = stream(1);
    let mut x = DenseMatrix::zeros(design.n, 2);
    for i in 0..design.n {
        x[(i, 0)] = 1.0;
        x[(i, 1)] = xr.sample(StandardNormal);
    }
    let y = simulate_response(&w, &x, &design.theta0(), &design.errors.distribution(), &mut stream(2))?;
    SarData::new(y, x, w)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub theta: Vec<f64>,
    /// Sandwich standard errors when inference was requested and succeeded.
    pub std_errors: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub seed: u64,
    pub estimates: BTreeMap<Method, EstimateRecord>,
    /// Wall-clock ms for fit_qsm plus fit_improved.
    pub t_s_ms: Option<f64>,
    pub t_m_ms: Option<f64>,
    /// m4/σ̂⁴ from QSM residuals.
    pub kurtosis: Option<f64>,
    pub failures: Vec<String>,
}

fn run_one(design: &SimDesign, rep: usize) -> ReplicationRecord {
    let mut rec = ReplicationRecord {
        rep,
        seed: design.base_seed.wrapping_add(rep as u64),
        estimates: BTreeMap::new(),
        t_s_ms: None,
        t_m_ms: None,
        kurtosis: None,
        failures: Vec::new(),
    };
    let data = match replication_data(design, rep) {
        Ok(d) => d,
        Err(e) => {
            rec.failures.push(format!("data: {e}"));
            return rec;
        }
    };
    let opts = FitOptions { logdet: design.logdet, ..FitOptions::default() };
    let want_s = design.has(Method::Qsm) || design.has(Method::QsmImproved);
    if want_s {
        let start = Instant::now();
        let fits = qsm::fit_qsm(&data, &opts).and_then(|r| {
            let imp = if design.has(Method::QsmImproved) { Some(qsm::fit_improved_with(&data, r.theta.lambda, &opts)?) } else { None };
            Ok((r, imp))
        });
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        match fits {
            Ok((q, imp)) => {
                rec.t_s_ms = Some(elapsed);
                if let Ok(e) = residuals(&data, &q.theta) {
                    let m4 = e.iter().map(|v| v.powi(4)).sum::<f64>() / e.len() as f64;
                    rec.kurtosis = Some(m4 / (q.theta.sigma2 * q.theta.sigma2));
                }
                let prims = if design.inference {
                    ShiftPrimitives::new(&data, q.theta.lambda, &InferenceOptions::default()).map_err(|e| rec.failures.push(format!("inference: {e}"))).ok()
                } else {
                    None
                };
                let se_of = |cov: Result<DenseMatrix>| -> Option<Vec<f64>> {
                    cov.ok().map(|c| (0..c.nrows()).map(|k| (c[(k, k)].max(0.0) / data.n() as f64).sqrt()).collect())
                };
                if design.has(Method::Qsm) {
                    let se = prims.as_ref().and_then(|pr| {
                        se_of(inference::moment_plugins(&data, &q.theta).and_then(|m| {
                            inference::qsm_sandwich_with(&data, &q.theta, &m, pr)?.sandwich_qsm.ok_or(SarError::NotInvertible("U_S".into()))
                        }))
                    });
                    rec.estimates.insert(Method::Qsm, EstimateRecord { theta: q.theta.to_vec(), std_errors: se });
                }
                if let Some(imp) = imp {
                    let se = prims.as_ref().and_then(|pr| {
                        se_of(inference::moment_plugins(&data, &imp.theta).and_then(|m| {
                            inference::improved_sandwich_with(&data, &imp.theta, &m, pr)?
                                .sandwich_improved
                                .ok_or(SarError::NotInvertible("Ξ".into()))
                        }))
                    });
                    rec.estimates.insert(Method::QsmImproved, EstimateRecord { theta: imp.theta.to_vec(), std_errors: se });
                }
            }
            Err(e) => rec.failures.push(format!("qsm: {e}")),
        }
    }
    if design.has(Method::Qmle) {
        let start = Instant::now();
        match qmle::fit_qmle(&data, &opts) {
            Ok(r) => {
                rec.t_m_ms = Some(start.elapsed().as_secs_f64() * 1e3);
                rec.estimates.insert(Method::Qmle, EstimateRecord { theta: r.theta.to_vec(), std_errors: None });
            }
            Err(e) => rec.failures.push(format!("qmle: {e}")),
        }
    }
    rec
}

/// All replications, in replication order.
pub fn run_replications(design: &SimDesign, threads: Option<usize>) -> Result<Vec<ReplicationRecord>> {
    design.validate()?;
    let work = || (0..design.reps).into_par_iter().map(|r| run_one(design, r)).collect::<Vec<_>>();
    match threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t.max(1))
                .build()
                .map_err(|e| SarError::Config { key: "threads".into(), reason: e.to_string() })?;
            Ok(pool.install(work))
        }
        None => Ok(work()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorMetrics {
    pub method: Method,
    pub params: Vec<String>,
    pub successes: usize,
    pub bias: Vec<f64>,
    pub sd: Vec<f64>,
    pub rmse: Vec<f64>,
    /// Mean sandwich standard error per parameter.
    pub mean_se: Option<Vec<f64>>,
    /// Fraction of nominal 95% Wald intervals covering the truth.
    pub coverage: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub design: SimDesign,
    pub reps: usize,
    pub failed_reps: usize,
    pub failure_rate: f64,
    pub estimators: Vec<EstimatorMetrics>,
    /// Mean seconds per replication.
    pub t_s: Option<f64>,
    pub t_m: Option<f64>,
    pub ratio: Option<f64>,
    pub mean_kurtosis: Option<f64>,
}

/// Pairwise summation; result independent of worker scheduling since input order is fixed.
fn pairwise_sum(x: &[f64]) -> f64 {
    if x.len() <= 8 {
        return x.iter().sum();
    }
    let mid = x.len() / 2;
    pairwise_sum(&x[..mid]) + pairwise_sum(&x[mid..])
}

fn mean(x: &[f64]) -> Option<f64> {
    if x.is_empty() {
        None
    } else {
        Some(pairwise_sum(x) / x.len() as f64)
    }
}

/// BIAS = mean(θ̂ - θ₀), SD with divisor R, RMSE = sqrt(BIAS² + SD²).
pub fn aggregate(design: &SimDesign, records: &[ReplicationRecord]) -> MetricsTable {
    let theta0 = design.theta0().to_vec();
    let q = theta0.len();
    let params: Vec<String> = {
        let mut v = vec!["lambda".to_string()];
        v.extend((1..=design.beta0.len()).map(|j| format!("beta{j}")));
        v.push("sigma2".into());
        v
    };
    let z = 1.959_963_984_540_054;
    let mut estimators = Vec::new();
    for &m in &design.estimators {
        let rows: Vec<&EstimateRecord> = records.iter().filter_map(|r| r.estimates.get(&m)).collect();
        let k = rows.len();
        let mut bias = vec![f64::NAN; q];
        let mut sd = vec![f64::NAN; q];
        let mut rmse = vec![f64::NAN; q];
        for j in 0..q {
            let vals: Vec<f64> = rows.iter().map(|r| r.theta[j]).collect();
            if let Some(mu) = mean(&vals) {
                let dev: Vec<f64> = vals.iter().map(|v| (v - mu) * (v - mu)).collect();
                bias[j] = mu - theta0[j];
                sd[j] = (pairwise_sum(&dev) / k as f64).sqrt();
                rmse[j] = (bias[j] * bias[j] + sd[j] * sd[j]).sqrt();
            }
        }
        let with_se: Vec<(&Vec<f64>, &Vec<f64>)> = rows.iter().filter_map(|r| r.std_errors.as_ref().map(|s| (&r.theta, s))).collect();
        let (mean_se, coverage) = if with_se.is_empty() {
            (None, None)
        } else {
            let ms = (0..q).map(|j| mean(&with_se.iter().map(|(_, s)| s[j]).collect::<Vec<_>>()).unwrap_or(f64::NAN)).collect();
            let cov = (0..q)
                .map(|j| {
                    let hits: Vec<f64> = with_se.iter().map(|(t, s)| if (t[j] - theta0[j]).abs() <= z * s[j] { 1.0 } else { 0.0 }).collect();
                    mean(&hits).unwrap_or(f64::NAN)
                })
                .collect();
            (Some(ms), Some(cov))
        };
        estimators.push(EstimatorMetrics { method: m, params: params.clone(), successes: k, bias, sd, rmse, mean_se, coverage });
    }
    let failed_reps = records.iter().filter(|r| !r.failures.is_empty()).count();
    let ts: Vec<f64> = records.iter().filter_map(|r| r.t_s_ms).map(|v| v / 1e3).collect();
    let tm: Vec<f64> = records.iter().filter_map(|r| r.t_m_ms).map(|v| v / 1e3).collect();
    let (t_s, t_m) = (mean(&ts), mean(&tm));
    let ratio = match (t_s, t_m) {
        (Some(s), Some(m)) if s > 0.0 => Some(m / s),
        _ => None,
    };
    let kurt: Vec<f64> = records.iter().filter_map(|r| r.kurtosis).collect();
    MetricsTable {
        design: design.clone(),
        reps: records.len(),
        failed_reps,
        failure_rate: if records.is_empty() { 0.0 } else { failed_reps as f64 / records.len() as f64 },
        estimators,
        t_s,
        t_m,
        ratio,
        mean_kurtosis: mean(&kurt),
    }
}

pub fn run_design(design: &SimDesign, threads: Option<usize>) -> Result<MetricsTable> {
    let records = run_replications(design, threads)?;
    Ok(aggregate(design, &records))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableFormat {
    Csv,
    Json,
    Markdown,
}

impl std::str::FromStr for TableFormat {
    type Err = SarError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TableFormat::Csv),
            "json" => Ok(TableFormat::Json),
            "markdown" | "md" => Ok(TableFormat::Markdown),
            other => Err(SarError::InvalidInput(format!("unknown table format `{other}`"))),
        }
    }
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.digits$}"),
        _ => String::new(),
    }
}

/// BIAS, SD and RMSE are reported ×100; times in seconds.
pub fn emit_table(table: &MetricsTable, format: TableFormat) -> Result<String> {
    const HEADER: [&str; 10] = ["estimator", "parameter", "bias_x100", "sd_x100", "rmse_x100", "mean_se_x100", "coverage", "t_s", "t_m", "ratio"];
    match format {
        TableFormat::Json => serde_json::to_string_pretty(table).map_err(|e| SarError::InvalidInput(e.to_string())),
        TableFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let io = |e: csv::Error| SarError::InvalidInput(e.to_string());
            w.write_record(HEADER).map_err(io)?;
            for em in &table.estimators {
                for (j, name) in em.params.iter().enumerate() {
                    w.write_record([
                        em.method.as_str().to_string(),
                        name.clone(),
                        fmt_opt(Some(100.0 * em.bias[j]), 4),
                        fmt_opt(Some(100.0 * em.sd[j]), 4),
                        fmt_opt(Some(100.0 * em.rmse[j]), 4),
                        fmt_opt(em.mean_se.as_ref().map(|s| 100.0 * s[j]), 4),
                        fmt_opt(em.coverage.as_ref().map(|c| c[j]), 4),
                        fmt_opt(table.t_s, 6),
                        fmt_opt(table.t_m, 6),
                        fmt_opt(table.ratio, 3),
                    ])
                    .map_err(io)?;
                }
            }
            let bytes = w.into_inner().map_err(|e| SarError::InvalidInput(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| SarError::InvalidInput(e.to_string()))
        }
        TableFormat::Markdown => {
            let d = &table.design;
            let mut s = String::new();
            let _ = writeln!(
                s,
                "### {}: n = {}, lambda0 = {}, {:?} weights, {:?} errors, {} reps ({} failed)\n",
                d.name, d.n, d.lambda0, d.weights, d.errors, table.reps, table.failed_reps
            );
            let _ = writeln!(s, "Values are 100 times the true values for BIAS, SD and RMSE.\n");
            let _ = writeln!(s, "| estimator | parameter | BIAS | SD | RMSE | mean SE | coverage |");
            let _ = writeln!(s, "|---|---|---:|---:|---:|---:|---:|");
            for em in &table.estimators {
                for (j, name) in em.params.iter().enumerate() {
                    let _ = writeln!(
                        s,
                        "| {} | {} | {:.2} | {:.2} | {:.2} | {} | {} |",
                        em.method,
                        name,
                        100.0 * em.bias[j],
                        100.0 * em.sd[j],
                        100.0 * em.rmse[j],
                        fmt_opt(em.mean_se.as_ref().map(|v| 100.0 * v[j]), 2),
                        fmt_opt(em.coverage.as_ref().map(|v| v[j]), 3)
                    );
                }
            }
            let _ = writeln!(s, "\n| t_S (s) | t_M (s) | t_M / t_S |\n|---:|---:|---:|");
            let _ = writeln!(s, "| {} | {} | {} |", fmt_opt(table.t_s, 5), fmt_opt(table.t_m, 5), fmt_opt(table.ratio, 2));
            if let Some(k) = table.mean_kurtosis {
                let _ = writeln!(s, "\nMean residual kurtosis m4/sigma2^2: {k:.3}");
            }
            Ok(s)
        }
    }
}

/// Writes `<name>.csv`, `<name>.json` and `<name>.md` into `out_dir`.
pub fn write_tables(table: &MetricsTable, out_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| SarError::Io { path: out_dir.display().to_string(), source: e })?;
    let mut written = Vec::new();
    for (fmt, ext) in [(TableFormat::Csv, "csv"), (TableFormat::Json, "json"), (TableFormat::Markdown, "md")] {
        let path = out_dir.join(format!("{}.{ext}", table.design.name));
        std::fs::write(&path, emit_table(table, fmt)?).map_err(|e| SarError::Io { path: path.display().to_string(), source: e })?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(reps: usize) -> SimDesign {
        SimDesign { name: "t".into(), n: 60, reps, base_seed: 5, ..SimDesign::default() }
    }

    #[test]
    fn parse_round_trip_and_errors() {
        let d = SimDesign::parse("# comment\nname = x\nn = 300\nlambda0 = 0.5\nbeta0 = 2, 1\nweights = sbm\nerrors = mixture\nreps = 7\nseed = 9\nestimators = qsm, qmle\ninference = true\n").unwrap();
        assert_eq!(d.n, 300);
        assert_eq!(d.weights, WeightsKind::Sbm);
        assert_eq!(d.estimators, vec![Method::Qsm, Method::Qmle]);
        assert!(d.inference);
        match SimDesign::parse("n = 100\nbogus = 3\n") {
            Err(SarError::Config { key, .. }) => assert_eq!(key, "bogus"),
            other => panic!("{other:?}"),
        }
        match SimDesign::parse("lambda0 = 1.5\n") {
            Err(SarError::Config { key, .. }) => assert_eq!(key, "lambda0"),
            other => panic!("{other:?}"),
        }
        assert!(SimDesign::parse("reps = 0").is_err());
    }

    #[test]
    fn replication_data_is_deterministic() {
        let d = small(1);
        let a = replication_data(&d, 3).unwrap();
        let b = replication_data(&d, 3).unwrap();
        assert_eq!(a.y(), b.y());
        assert_ne!(a.y(), replication_data(&d, 4).unwrap().y());
        assert!(a.x().col(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn tables_are_reproducible() {
        let d = small(2);
        let a = run_design(&d, Some(1)).unwrap();
        let b = run_design(&d, Some(1)).unwrap();
        assert_eq!(a.estimators, b.estimators);
        for em in &a.estimators {
            for j in 0..4 {
                let r = (em.bias[j].powi(2) + em.sd[j].powi(2)).sqrt();
                assert!((em.rmse[j] - r).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn shared_lambda_between_qsm_fits() {
        let recs = run_replications(&small(3), None).unwrap();
        for r in recs {
            assert_eq!(r.estimates[&Method::Qsm].theta[0], r.estimates[&Method::QsmImproved].theta[0]);
            assert!(r.t_s_ms.unwrap() > 0.0 && r.t_m_ms.unwrap() > 0.0);
        }
    }

    #[test]
    fn empty_estimator_set_gives_header_only() {
        let d = SimDesign { estimators: vec![], ..small(1) };
        let t = run_design(&d, None).unwrap();
        let csv = emit_table(&t, TableFormat::Csv).unwrap();
        assert_eq!(csv.lines().count(), 1);
        let json = emit_table(&t, TableFormat::Json).unwrap();
        let back: MetricsTable = serde_json::from_str(&json).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn inference_fills_coverage() {
        let d = SimDesign { inference: true, estimators: vec![Method::Qsm, Method::QsmImproved], ..small(4) };
        let t = run_design(&d, None).unwrap();
        for em in &t.estimators {
            assert!(em.mean_se.as_ref().unwrap().iter().all(|v| *v > 0.0));
            assert!(em.coverage.as_ref().unwrap().iter().all(|c| (0.0..=1.0).contains(c)));
        }
        let md = emit_table(&t, TableFormat::Markdown).unwrap();
        assert!(md.contains("100 times"));
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let x: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        assert!((pairwise_sum(&x) - x.iter().sum::<f64>()).abs() < 1e-10);
    }
}
