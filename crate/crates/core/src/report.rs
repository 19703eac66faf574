//! Fit results, fit options and Wald statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::inference::InferenceOptions;
use crate::linalg::{DenseMatrix, LogDetStrategy};
use crate::model::ParamVector;
use crate::optim::GridBrentOptions;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Qsm,
    QsmImproved,
    Qmle,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Qsm => "qsm",
            Method::QsmImproved => "qsm_improved",
            Method::Qmle => "qmle",
        }
    }

    pub const ALL: [Method; 3] = [Method::Qmle, Method::Qsm, Method::QsmImproved];
}

impl std::str::FromStr for Method {
    type Err = crate::SarError;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s.trim() {
            "qsm" => Ok(Method::Qsm),
            "qsm_improved" | "improved" => Ok(Method::QsmImproved),
            "qmle" => Ok(Method::Qmle),
            other => Err(crate::SarError::InvalidInput(format!("unknown estimator `{other}`"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitOptions {
    pub lambda_bounds: (f64, f64),
    pub search: GridBrentOptions,
    pub logdet: LogDetStrategy,
    /// Compute sandwich covariances, standard errors and p-values.
    pub inference: bool,
    pub inference_opts: InferenceOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            lambda_bounds: crate::linalg::shift::DEFAULT_LAMBDA_BOUNDS,
            search: GridBrentOptions::default(),
            logdet: LogDetStrategy::Auto,
            inference: false,
            inference_opts: InferenceOptions::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FitReport {
    pub method: Method,
    pub theta: ParamVector,
    pub param_names: Vec<String>,
    pub n: usize,
    /// Empty when inference was not requested or failed.
    pub std_errors: Vec<f64>,
    pub p_values: Vec<Option<f64>>,
    /// Asymptotic covariance of √n(θ̂ - θ₀).
    pub cov: Option<DenseMatrix>,
    pub timing_ms: f64,
    pub diagnostics: BTreeMap<String, serde_json::Value>,
}

impl FitReport {
    pub fn new(method: Method, theta: ParamVector, param_names: Vec<String>, n: usize, timing_ms: f64) -> Self {
        Self {
            method,
            theta,
            param_names,
            n,
            std_errors: Vec::new(),
            p_values: Vec::new(),
            cov: None,
            timing_ms,
            diagnostics: BTreeMap::new(),
        }
    }

    pub fn attach_covariance(&mut self, cov: DenseMatrix) {
        let w = wald_report(&self.theta.to_vec(), &cov, self.n);
        if !w.flagged.is_empty() {
            self.diagnostics.insert("negative_variance_params".into(), serde_json::json!(w.flagged));
        }
        self.std_errors = w.std_errors;
        self.p_values = w.p_values;
        self.cov = Some(cov);
    }

    pub fn note(&mut self, key: &str, value: impl Serialize) {
        self.diagnostics.insert(key.to_string(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaldReport {
    /// NaN where the covariance diagonal is negative.
    pub std_errors: Vec<f64>,
    pub p_values: Vec<Option<f64>>,
    pub flagged: Vec<usize>,
}

/// se_k = sqrt(cov_kk / n); two-sided normal p-value against zero.
pub fn wald_report(theta: &[f64], cov: &DenseMatrix, n: usize) -> WaldReport {
    let mut std_errors = Vec::with_capacity(theta.len());
    let mut p_values = Vec::with_capacity(theta.len());
    let mut flagged = Vec::new();
    for (k, &t) in theta.iter().enumerate() {
        let v = cov[(k, k)];
        if !(v >= 0.0) || n == 0 {
            flagged.push(k);
            std_errors.push(f64::NAN);
            p_values.push(None);
            continue;
        }
        let se = (v / n as f64).sqrt();
        std_errors.push(se);
        p_values.push(Some(if t == 0.0 { 1.0 } else { two_sided_p(t / se) }));
    }
    WaldReport { std_errors, p_values, flagged }
}

/// 2(1 - Φ(|z|))
pub fn two_sided_p(z: f64) -> f64 {
    libm::erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}
