//! Command-line surface: `fit`, `simulate`, `lqcheck` and `bench`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::{render_bench, run_bench, BenchOptions, BenchReport};
use crate::error::{Result, SarError};
use crate::inference::InferenceOptions;
use crate::io::{assemble, build_design, read_edge_list, CovariateTable, DesignOptions, IsolatedPolicy};
use crate::linalg::{DenseMatrix, LogDetStrategy};
use crate::lqform::{lq_cov_parts, lq_mean, lq_sample, random_instance, LqForm, LqMatrix, MomentDiagonals};
use crate::report::{FitOptions, FitReport, Method};
use crate::simharness::{emit_table, run_design, write_tables, ErrorKind, SimDesign, TableFormat, WeightsKind};
use crate::{qmle, qsm};

pub const SCHEMA_VERSION: u32 = 1;
pub const RESULTS_DIR_ENV: &str = "SARQSM_RESULTS_DIR";

#[derive(Debug, Parser)]
#[command(name = "sarqsm", version, about = "Quasi-score matching estimation for spatial autoregressive models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the SAR model to an edge list and a covariate table.
    Fit(FitArgs),
    /// Run a Monte Carlo design file and write metric tables.
    Simulate(SimulateArgs),
    /// Compare closed-form linear-quadratic moments with Monte Carlo.
    Lqcheck(LqCheckArgs),
    /// Time QSM against QMLE over a list of sample sizes.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Edge list, one "i j" pair per line.
    pub edges: PathBuf,
    /// Comma-separated covariate table with a header row.
    pub covariates: PathBuf,
    #[arg(long)]
    pub response: String,
    /// Column holding node ids; row order is used when absent.
    #[arg(long)]
    pub id_column: Option<String>,
    /// Node ids in the edge list and id column start at 1.
    #[arg(long)]
    pub one_based: bool,
    #[arg(long)]
    pub no_intercept: bool,
    #[arg(long, default_value = "drop")]
    pub isolated: IsolatedPolicy,
    #[arg(long, value_delimiter = ',', default_value = "qmle,qsm,qsm_improved")]
    pub estimators: Vec<Method>,
    #[arg(long)]
    pub no_inference: bool,
    #[arg(long, default_value = "auto")]
    pub logdet: LogDetStrategy,
    /// Largest n for exact trace primitives; above it Hutchinson probes are used.
    #[arg(long, default_value_t = 2000)]
    pub dense_max: usize,
    #[arg(long, default_value_t = 200)]
    pub probes: usize,
    #[arg(long, default_value_t = 20240601)]
    pub seed: u64,
    #[arg(long, env = RESULTS_DIR_ENV, default_value = "results")]
    pub out_dir: PathBuf,
    /// Stem of the report files.
    #[arg(long, default_value = "fit")]
    pub name: String,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    pub design: PathBuf,
    #[arg(long, env = RESULTS_DIR_ENV, default_value = "results")]
    pub out_dir: PathBuf,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Overrides the design's replication count.
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long, default_value = "markdown")]
    pub format: TableFormat,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct LqCheckArgs {
    #[arg(long, default_value_t = 30)]
    pub n: usize,
    #[arg(long, default_value_t = 3)]
    pub d: usize,
    #[arg(long, default_value = "normal")]
    pub errors: ErrorKind,
    #[arg(long, default_value_t = 2_000_000)]
    pub draws: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub instances: usize,
    /// A = 0 with a fixed B, whose moments are known exactly.
    #[arg(long)]
    pub linear_only: bool,
    #[arg(long, default_value_t = 4.0)]
    pub mean_tol: f64,
    #[arg(long, default_value_t = 5.0)]
    pub cov_tol: f64,
    /// Writes the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Halves the trace term of the covariance; the check must then fail.
    #[arg(long, hide = true)]
    pub corrupt_covariance: bool,
}

impl Default for LqCheckArgs {
    fn default() -> Self {
        Self {
            n: 30,
            d: 3,
            errors: ErrorKind::Normal,
            draws: 2_000_000,
            seed: 1,
            instances: 1,
            linear_only: false,
            mean_tol: 4.0,
            cov_tol: 5.0,
            json: None,
            corrupt_covariance: false,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "500,1000,5000")]
    pub n_list: Vec<usize>,
    #[arg(long, default_value = "bernoulli")]
    pub weights: WeightsKind,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// QMLE is skipped above this n.
    #[arg(long)]
    pub qmle_max_n: Option<usize>,
    #[arg(long, default_value_t = 0.2)]
    pub min_seconds: f64,
    /// Writes bench.json here.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn io_err(path: &Path, source: std::io::Error) -> SarError {
    SarError::Io { path: path.display().to_string(), source }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| SarError::InvalidInput(format!("serializing report: {e}")))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitFailure {
    pub method: Method,
    pub error: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitOutput {
    pub schema_version: u32,
    pub edges: String,
    pub covariates: String,
    pub response: String,
    pub isolated: IsolatedPolicy,
    pub n: usize,
    pub dropped_nodes: Vec<usize>,
    pub fits: Vec<FitReport>,
    pub failures: Vec<FitFailure>,
}

pub fn cmd_fit(args: &FitArgs) -> Result<FitOutput> {
    let edges = read_edge_list(&args.edges, args.one_based)?;
    let table = CovariateTable::read(&args.covariates)?;
    let design = build_design(
        &table,
        &args.covariates,
        &DesignOptions {
            response: args.response.clone(),
            id_column: args.id_column.clone(),
            intercept: !args.no_intercept,
            one_based: args.one_based,
        },
    )?;
    let asm = assemble(&edges, &design, args.isolated)?;
    let opts = FitOptions {
        logdet: args.logdet,
        inference: !args.no_inference,
        inference_opts: InferenceOptions { n_dense_max: args.dense_max, probes: args.probes, seed: args.seed },
        ..FitOptions::default()
    };
    let mut methods = args.estimators.clone();
    methods.sort();
    methods.dedup();
    let (fits, failures) = fit_all(&asm.data, &methods, &opts);
    Ok(FitOutput {
        schema_version: SCHEMA_VERSION,
        edges: args.edges.display().to_string(),
        covariates: args.covariates.display().to_string(),
        response: args.response.clone(),
        isolated: args.isolated,
        n: asm.data.n(),
        dropped_nodes: asm.dropped,
        fits,
        failures,
    })
}

/// Fits in display order; the improved estimator reuses the QSM λ̂.
pub fn fit_all(data: &crate::SarData, methods: &[Method], opts: &FitOptions) -> (Vec<FitReport>, Vec<FitFailure>) {
    let mut fits = Vec::new();
    let mut failures = Vec::new();
    let mut lambda_hat: Option<std::result::Result<f64, String>> = None;
    for m in Method::ALL {
        if !methods.contains(&m) {
            continue;
        }
        let res = match m {
            Method::Qmle => qmle::fit_qmle(data, opts),
            Method::Qsm => qsm::fit_qsm(data, opts),
            Method::QsmImproved => {
                let lam = lambda_hat.clone().unwrap_or_else(|| {
                    let bare = FitOptions { inference: false, ..opts.clone() };
                    qsm::fit_qsm(data, &bare).map(|r| r.theta.lambda).map_err(|e| e.to_string())
                });
                match lam {
                    Ok(l) => qsm::fit_improved_with(data, l, opts),
                    Err(e) => {
                        failures.push(FitFailure { method: m, error: format!("QSM step failed: {e}") });
                        continue;
                    }
                }
            }
        };
        match res {
            Ok(r) => {
                if m == Method::Qsm {
                    lambda_hat = Some(Ok(r.theta.lambda));
                }
                fits.push(r);
            }
            Err(e) => {
                if m == Method::Qsm {
                    lambda_hat = Some(Err(e.to_string()));
                }
                failures.push(FitFailure { method: m, error: e.to_string() });
            }
        }
    }
    (fits, failures)
}

fn method_label(m: Method) -> &'static str {
    match m {
        Method::Qmle => "QMLE",
        Method::Qsm => "QSM",
        Method::QsmImproved => "QSM improved",
    }
}

fn fmt_p(p: Option<f64>) -> String {
    match p {
        None => "-".into(),
        Some(p) if p < 1e-4 => "<1e-4".into(),
        Some(p) => format!("{p:.4}"),
    }
}

/// Rows are parameters; each estimator contributes "coef. (s.e.)" and "p-value" columns.
pub fn render_fit_table(out: &FitOutput) -> String {
    let mut s = String::new();
    let Some(first) = out.fits.first() else {
        let _ = writeln!(s, "no estimator succeeded");
        return s;
    };
    let names = &first.param_names;
    let label_w = names.iter().map(|n| n.len()).max().unwrap_or(6).max(6);
    let col_w = 22;
    let _ = write!(s, "{:label_w$}", "");
    for f in &out.fits {
        let _ = write!(s, " | {:^w$}", method_label(f.method), w = col_w + 10);
    }
    let _ = writeln!(s);
    let _ = write!(s, "{:label_w$}", "");
    for _ in &out.fits {
        let _ = write!(s, " | {:>col_w$} {:>9}", "coef. (std.error)", "p-value");
    }
    let _ = writeln!(s);
    for (i, name) in names.iter().enumerate() {
        let _ = write!(s, "{name:label_w$}");
        for f in &out.fits {
            let est = f.theta.to_vec()[i];
            let cell = match f.std_errors.get(i) {
                Some(se) if se.is_finite() => format!("{est:.4} ({se:.4})"),
                _ => format!("{est:.4}"),
            };
            let _ = write!(s, " | {cell:>col_w$} {:>9}", fmt_p(f.p_values.get(i).copied().flatten()));
        }
        let _ = writeln!(s);
    }
    let _ = writeln!(s, "n = {}, dropped nodes = {}", out.n, out.dropped_nodes.len());
    for f in &out.fits {
        let _ = writeln!(s, "{} time: {:.3} ms", method_label(f.method), f.timing_ms);
    }
    for f in &out.failures {
        let _ = writeln!(s, "{} failed: {}", method_label(f.method), f.error);
    }
    s
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LqInstanceCheck {
    pub seed: u64,
    pub closed_mean: Vec<f64>,
    pub mc_mean: Vec<f64>,
    pub closed_cov: DenseMatrix,
    pub mc_cov: DenseMatrix,
    /// Largest |MC − closed form| / MC standard error over the mean entries.
    pub max_mean_z: f64,
    pub max_cov_z: f64,
    /// Linear-only instances: closed form equals the direct expression exactly.
    pub exact: Option<bool>,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LqCheckReport {
    pub schema_version: u32,
    pub options: LqCheckArgs,
    pub instances: Vec<LqInstanceCheck>,
    pub pass: bool,
}

fn linear_instance(n: usize, d: usize) -> Result<LqForm> {
    let b = DenseMatrix::from_fn(n, d, |i, j| ((i + 1) as f64 * (j + 1) as f64 * 0.7).sin());
    LqForm::new((0..d).map(|_| LqMatrix::Zero(n)).collect(), b)
}

pub fn cmd_lqcheck(args: &LqCheckArgs) -> Result<LqCheckReport> {
    if args.n < 1 || args.d < 1 || args.instances < 1 {
        return Err(SarError::InvalidInput("n, d and instances must be positive".into()));
    }
    let err = args.errors.distribution();
    let moms = MomentDiagonals::from_distribution(args.n, &err)?;
    let mut instances = Vec::with_capacity(args.instances);
    for k in 0..args.instances {
        let seed = args.seed.wrapping_add(k as u64);
        let lq = if args.linear_only { linear_instance(args.n, args.d)? } else { random_instance(args.n, args.d, seed)? };
        let closed_mean = lq_mean(&lq, &moms)?;
        let (gauss, extra) = lq_cov_parts(&lq, &moms)?;
        let lin = DenseMatrix::from_fn(args.d, args.d, |j, l| {
            let (bj, bl) = (lq.b().col(j), lq.b().col(l));
            (0..args.n).map(|i| bj[i] * moms.m2[i] * bl[i]).sum()
        });
        let closed_cov = if args.corrupt_covariance {
            DenseMatrix::from_fn(args.d, args.d, |j, l| 0.5 * (gauss[(j, l)] - lin[(j, l)]) + lin[(j, l)] + extra[(j, l)])
        } else {
            gauss.add(&extra)?
        };
        let exact = args.linear_only.then(|| {
            closed_mean.iter().all(|&m| m == 0.0)
                && (0..args.d).all(|j| (0..args.d).all(|l| (closed_cov[(j, l)] - lin[(j, l)]).abs() <= 1e-14 * lin[(j, l)].abs().max(1.0)))
        });
        let mc = lq_sample(&lq, &err, args.draws, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5EED)?;
        let max_mean_z = (0..args.d)
            .map(|j| {
                let diff = (mc.mean[j] - closed_mean[j]).abs();
                if mc.mean_se[j] > 0.0 {
                    diff / mc.mean_se[j]
                } else if diff == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            })
            .fold(0.0, f64::max);
        let mut max_cov_z: f64 = 0.0;
        for j in 0..args.d {
            for l in 0..args.d {
                let diff = (mc.cov[(j, l)] - closed_cov[(j, l)]).abs();
                let se = mc.cov_se[(j, l)];
                let z = if se > 0.0 { diff / se } else if diff <= 1e-12 { 0.0 } else { f64::INFINITY };
                max_cov_z = max_cov_z.max(z);
            }
        }
        let pass = max_mean_z <= args.mean_tol && max_cov_z <= args.cov_tol && exact.unwrap_or(true);
        instances.push(LqInstanceCheck { seed, closed_mean, mc_mean: mc.mean, closed_cov, mc_cov: mc.cov, max_mean_z, max_cov_z, exact, pass });
    }
    let pass = instances.iter().all(|i| i.pass);
    Ok(LqCheckReport { schema_version: SCHEMA_VERSION, options: args.clone(), instances, pass })
}

pub fn render_lqcheck(report: &LqCheckReport) -> String {
    let o = &report.options;
    let mut s = String::new();
    let _ = writeln!(s, "lqcheck n={} d={} errors={:?} draws={} tolerances: mean {} SE, cov {} SE", o.n, o.d, o.errors, o.draws, o.mean_tol, o.cov_tol);
    for i in &report.instances {
        let exact = i.exact.map_or(String::new(), |e| format!(" exact={e}"));
        let _ = writeln!(
            s,
            "seed {:>6}: max mean z = {:.3}, max cov z = {:.3}{exact} -> {}",
            i.seed,
            i.max_mean_z,
            i.max_cov_z,
            if i.pass { "PASS" } else { "FAIL" }
        );
    }
    let _ = writeln!(s, "{}", if report.pass { "PASS" } else { "FAIL" });
    s
}

#[derive(Serialize)]
struct BenchOutput<'a> {
    schema_version: u32,
    #[serde(flatten)]
    report: &'a BenchReport,
}

fn run_command(cmd: &Command) -> Result<bool> {
    match cmd {
        Command::Fit(args) => {
            let out = cmd_fit(args)?;
            write_json(&args.out_dir.join(format!("{}.json", args.name)), &out)?;
            let table = render_fit_table(&out);
            let txt = args.out_dir.join(format!("{}.txt", args.name));
            std::fs::write(&txt, &table).map_err(|e| io_err(&txt, e))?;
            print!("{table}");
            Ok(out.failures.is_empty())
        }
        Command::Simulate(args) => {
            let mut design = SimDesign::from_file(&args.design)?;
            if let Some(r) = args.reps {
                design.reps = r;
                design.validate()?;
            }
            let table = run_design(&design, args.threads)?;
            write_tables(&table, &args.out_dir)?;
            print!("{}", emit_table(&table, args.format)?);
            Ok(table.failed_reps < table.reps)
        }
        Command::Lqcheck(args) => {
            let report = cmd_lqcheck(args)?;
            if let Some(path) = &args.json {
                write_json(path, &report)?;
            }
            print!("{}", render_lqcheck(&report));
            Ok(report.pass)
        }
        Command::Bench(args) => {
            let opts = BenchOptions {
                n_list: args.n_list.clone(),
                weights: args.weights,
                seed: args.seed,
                qmle_max_n: args.qmle_max_n,
                min_seconds: args.min_seconds,
            };
            let report = run_bench(&opts)?;
            if let Some(dir) = &args.out_dir {
                write_json(&dir.join("bench.json"), &BenchOutput { schema_version: SCHEMA_VERSION, report: &report })?;
            }
            print!("{}", render_bench(&report));
            Ok(true)
        }
    }
}

pub fn exit_code(err: &SarError) -> i32 {
    if err.is_input_error() {
        2
    } else {
        1
    }
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    match run_command(&cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Parses `args` (program name first) and runs; clap usage errors exit with 2.
pub fn main_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let _ = e.print();
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn linear_only_is_exact() {
        let args = LqCheckArgs { n: 12, d: 1, draws: 20_000, linear_only: true, ..LqCheckArgs::default() };
        let r = cmd_lqcheck(&args).unwrap();
        assert_eq!(r.instances[0].exact, Some(true));
        assert_eq!(r.instances[0].closed_mean, vec![0.0]);
        assert!(r.pass);
    }

    #[test]
    fn corrupted_covariance_fails() {
        let base = LqCheckArgs { n: 30, d: 3, draws: 200_000, seed: 7, ..LqCheckArgs::default() };
        assert!(cmd_lqcheck(&base).unwrap().pass);
        let bad = LqCheckArgs { corrupt_covariance: true, ..base };
        assert!(!cmd_lqcheck(&bad).unwrap().pass);
    }

    #[test]
    fn p_value_formatting() {
        assert_eq!(fmt_p(Some(1e-6)), "<1e-4");
        assert_eq!(fmt_p(Some(0.0670)), "0.0670");
        assert_eq!(fmt_p(None), "-");
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(main_from_args(["sarqsm", "fit"]), 2);
        assert_eq!(main_from_args(["sarqsm", "bench", "--weights", "grid"]), 2);
    }
}
