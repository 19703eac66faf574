//! Bounded scalar minimization: a coarse grid followed by Brent's golden-section/parabolic search.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SarError};

const GOLDEN: f64 = 0.381_966_011_250_105_1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridBrentOptions {
    pub grid_points: usize,
    pub xtol: f64,
    pub max_iter: usize,
}

impl Default for GridBrentOptions {
    fn default() -> Self {
        Self { grid_points: 21, xtol: 1e-8, max_iter: 500 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScalarMinimum {
    pub x: f64,
    pub fx: f64,
    pub grid: Vec<f64>,
    /// NaN marks grid points where the objective failed.
    pub grid_values: Vec<f64>,
    pub trace: Vec<(f64, f64)>,
    pub iterations: usize,
    pub converged: bool,
}

/// Brent's bounded minimizer on [a, b]. Stops when the bracket half-width falls below
/// `xtol` (plus a relative term near machine precision).
pub fn brent_bounded(
    f: &mut dyn FnMut(f64) -> f64,
    a: f64,
    b: f64,
    xtol: f64,
    max_iter: usize,
    trace: &mut Vec<(f64, f64)>,
) -> (f64, f64, usize, bool) {
    let (mut a, mut b) = (a.min(b), a.max(b));
    let sqrt_eps = f64::EPSILON.sqrt();
    let mut x = a + GOLDEN * (b - a);
    let (mut w, mut v) = (x, x);
    let mut fx = f(x);
    trace.push((x, fx));
    let (mut fw, mut fv) = (fx, fx);
    let (mut d, mut e) = (0.0f64, 0.0f64);
    for it in 0..max_iter {
        let xm = 0.5 * (a + b);
        let tol1 = sqrt_eps * x.abs() + xtol / 3.0;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            return (x, fx, it, true);
        }
        let mut golden = true;
        if e.abs() > tol1 {
            let r = (x - w) * (fx - fv);
            let mut q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            q = 2.0 * (q - r);
            if q > 0.0 {
                p = -p;
            }
            q = q.abs();
            let e_old = e;
            e = d;
            if p.abs() < (0.5 * q * e_old).abs() && p > q * (a - x) && p < q * (b - x) {
                d = p / q;
                let u = x + d;
                if (u - a) < tol2 || (b - u) < tol2 {
                    d = if xm >= x { tol1 } else { -tol1 };
                }
                golden = false;
            }
        }
        if golden {
            e = if x >= xm { a - x } else { b - x };
            d = GOLDEN * e;
        }
        let u = if d.abs() >= tol1 { x + d } else { x + tol1.copysign(d) };
        let fu = f(u);
        trace.push((u, fu));
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    (x, fx, max_iter, false)
}

/// Evaluates an equispaced grid on [lo, hi], then runs Brent inside the bracket formed by
/// the neighbours of the best grid point. Failed evaluations count as +∞.
pub fn grid_then_brent(
    f: &mut dyn FnMut(f64) -> Result<f64>,
    lo: f64,
    hi: f64,
    opts: &GridBrentOptions,
) -> Result<ScalarMinimum> {
    if !(lo < hi) {
        return Err(SarError::InvalidInput(format!("empty search interval [{lo}, {hi}]")));
    }
    let k = opts.grid_points.max(3);
    let grid: Vec<f64> = (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect();
    let grid_values: Vec<f64> = grid
        .iter()
        .map(|&x| match f(x) {
            Ok(v) if v.is_finite() => v,
            _ => f64::NAN,
        })
        .collect();
    let best = grid_values
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_nan())
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .ok_or_else(|| SarError::Optimizer("objective failed at every grid point".into()))?;
    let a = grid[best.saturating_sub(1)];
    let b = grid[(best + 1).min(k - 1)];
    let mut trace = Vec::new();
    let mut g = |x: f64| match f(x) {
        Ok(v) if v.is_finite() => v,
        _ => f64::INFINITY,
    };
    let (mut x, mut fx, iterations, converged) = brent_bounded(&mut g, a, b, opts.xtol, opts.max_iter, &mut trace);
    if grid_values[best] < fx {
        x = grid[best];
        fx = grid_values[best];
    }
    Ok(ScalarMinimum { x, fx, grid, grid_values, trace, iterations, converged })
}
