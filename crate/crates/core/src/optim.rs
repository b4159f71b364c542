//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! Minimizes a smooth objective given as a closure that returns the value and
//! writes the gradient. The line search is the bracketing/zoom scheme with
//! safeguarded cubic interpolation.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    /// Number of stored correction pairs.
    pub memory: usize,
    pub max_iter: usize,
    /// Stop when `‖∇f‖_∞ ≤ grad_tol`.
    pub grad_tol: f64,
    /// Stop when `|f_k − f_{k+1}| ≤ f_tol · max(|f_k|, |f_{k+1}|, 1)`.
    pub f_tol: f64,
    /// Sufficient-decrease constant.
    pub c1: f64,
    /// Curvature constant.
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self { memory: 10, max_iter: 100, grad_tol: 1e-8, f_tol: 1e-14, c1: 1e-4, c2: 0.9, max_line_search: 40 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Gradient,
    FunctionChange,
    MaxIterations,
    /// No acceptable step was found; the result holds the last accepted iterate.
    LineSearch,
}

#[derive(Debug, Clone)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("objective or gradient is not finite at the starting point")]
    NonFiniteStart,
    #[error("empty parameter vector")]
    Empty,
}

struct Objective<'a, F> {
    f: &'a mut F,
    evaluations: usize,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> Objective<'_, F> {
    fn eval(&mut self, x: &[f64], g: &mut [f64]) -> f64 {
        self.evaluations += 1;
        (self.f)(x, g)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn finite(f: f64, g: &[f64]) -> bool {
    f.is_finite() && g.iter().all(|v| v.is_finite())
}

/// Minimizes `f` starting from `x0`. `f(x, grad)` returns the value and fills
/// `grad`.
pub fn minimize<F>(mut f: F, x0: &[f64], config: &LbfgsConfig) -> Result<LbfgsResult, OptimError>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    if n == 0 {
        return Err(OptimError::Empty);
    }
    let mut obj = Objective { f: &mut f, evaluations: 0 };
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = obj.eval(&x, &mut g);
    if !finite(fx, &g) {
        return Err(OptimError::NonFiniteStart);
    }

    let mut s_hist: Vec<Vec<f64>> = Vec::with_capacity(config.memory);
    let mut y_hist: Vec<Vec<f64>> = Vec::with_capacity(config.memory);
    let mut rho_hist: Vec<f64> = Vec::with_capacity(config.memory);
    let mut alpha_buf = vec![0.0; config.memory];
    let mut d = vec![0.0; n];
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];

    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;
    while iterations < config.max_iter {
        if inf_norm(&g) <= config.grad_tol {
            termination = Termination::Gradient;
            break;
        }

        // Two-loop recursion for d = −H g.
        d.copy_from_slice(&g);
        let k = s_hist.len();
        for j in (0..k).rev() {
            let a = rho_hist[j] * dot(&s_hist[j], &d);
            alpha_buf[j] = a;
            for (di, yi) in d.iter_mut().zip(&y_hist[j]) {
                *di -= a * yi;
            }
        }
        let gamma = if k > 0 {
            let yy = dot(&y_hist[k - 1], &y_hist[k - 1]);
            1.0 / (rho_hist[k - 1] * yy)
        } else {
            1.0 / inf_norm(&g).max(1.0)
        };
        for di in d.iter_mut() {
            *di *= gamma;
        }
        for j in 0..k {
            let b = rho_hist[j] * dot(&y_hist[j], &d);
            for (di, si) in d.iter_mut().zip(&s_hist[j]) {
                *di += (alpha_buf[j] - b) * si;
            }
        }
        for di in d.iter_mut() {
            *di = -*di;
        }
        let mut dg = dot(&d, &g);
        if !(dg < 0.0) {
            // Not a descent direction: restart from steepest descent.
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            let scale = 1.0 / inf_norm(&g).max(1.0);
            for (di, gi) in d.iter_mut().zip(&g) {
                *di = -scale * gi;
            }
            dg = dot(&d, &g);
        }

        let step = line_search(&mut obj, &x, fx, &d, dg, config, &mut x_new, &mut g_new);
        let Some(f_new) = step else {
            termination = Termination::LineSearch;
            break;
        };
        iterations += 1;

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if s_hist.len() == config.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
            rho_hist.push(1.0 / sy);
        }

        let f_old = fx;
        x.copy_from_slice(&x_new);
        g.copy_from_slice(&g_new);
        fx = f_new;
        if (f_old - fx).abs() <= config.f_tol * f_old.abs().max(fx.abs()).max(1.0) {
            termination = Termination::FunctionChange;
            break;
        }
    }
    if termination == Termination::MaxIterations && inf_norm(&g) <= config.grad_tol {
        termination = Termination::Gradient;
    }
    Ok(LbfgsResult { x, f: fx, grad: g, iterations, evaluations: obj.evaluations, termination })
}

/// Strong-Wolfe step along `d`. On success writes the new point and gradient
/// and returns the new value.
#[allow(clippy::too_many_arguments)]
fn line_search<F: FnMut(&[f64], &mut [f64]) -> f64>(
    obj: &mut Objective<'_, F>,
    x: &[f64],
    f0: f64,
    d: &[f64],
    dg0: f64,
    config: &LbfgsConfig,
    x_out: &mut [f64],
    g_out: &mut [f64],
) -> Option<f64> {
    let mut probe = |alpha: f64, xo: &mut [f64], go: &mut [f64], obj: &mut Objective<'_, F>| {
        for ((xi, &x0), &di) in xo.iter_mut().zip(x).zip(d) {
            *xi = x0 + alpha * di;
        }
        let f = obj.eval(xo, go);
        let dg = dot(go, d);
        (f, dg)
    };

    let mut a_prev = 0.0;
    let mut f_prev = f0;
    let mut dg_prev = dg0;
    let mut alpha = 1.0;
    let a_max = 1e10;
    let mut evals = 0;

    while evals < config.max_line_search {
        let (f, dg) = probe(alpha, x_out, g_out, obj);
        evals += 1;
        if !f.is_finite() || !dg.is_finite() {
            alpha = 0.5 * (a_prev + alpha);
            continue;
        }
        if f > f0 + config.c1 * alpha * dg0 || (evals > 1 && f >= f_prev) {
            return zoom(obj, &mut probe, f0, dg0, (a_prev, f_prev, dg_prev), (alpha, f, dg), config, evals, x_out, g_out);
        }
        if dg.abs() <= -config.c2 * dg0 {
            return Some(f);
        }
        if dg >= 0.0 {
            return zoom(obj, &mut probe, f0, dg0, (alpha, f, dg), (a_prev, f_prev, dg_prev), config, evals, x_out, g_out);
        }
        a_prev = alpha;
        f_prev = f;
        dg_prev = dg;
        alpha = (2.0 * alpha).min(a_max);
    }
    None
}

/// Minimizer of the cubic through (a, fa, da) and (b, fb, db), if defined.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> Option<f64> {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    t.is_finite().then_some(t)
}

#[allow(clippy::too_many_arguments)]
fn zoom<F, P>(
    obj: &mut Objective<'_, F>,
    probe: &mut P,
    f0: f64,
    dg0: f64,
    mut lo: (f64, f64, f64),
    mut hi: (f64, f64, f64),
    config: &LbfgsConfig,
    mut evals: usize,
    x_out: &mut [f64],
    g_out: &mut [f64],
) -> Option<f64>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    P: FnMut(f64, &mut [f64], &mut [f64], &mut Objective<'_, F>) -> (f64, f64),
{
    while evals < config.max_line_search {
        let (a_lo, a_hi) = (lo.0, hi.0);
        let width = (a_hi - a_lo).abs();
        if width <= f64::EPSILON * a_lo.abs().max(a_hi.abs()) {
            break;
        }
        let (left, right) = (a_lo.min(a_hi), a_lo.max(a_hi));
        let margin = 0.1 * width;
        let alpha = if hi.1.is_finite() {
            cubic_min(lo.0, lo.1, lo.2, hi.0, hi.1, hi.2)
                .filter(|&t| t > left + margin && t < right - margin)
                .unwrap_or(0.5 * (a_lo + a_hi))
        } else {
            0.5 * (a_lo + a_hi)
        };
        let (f, dg) = probe(alpha, x_out, g_out, obj);
        evals += 1;
        if !f.is_finite() || !dg.is_finite() || f > f0 + config.c1 * alpha * dg0 || f >= lo.1 {
            hi = (alpha, f, dg);
        } else {
            if dg.abs() <= -config.c2 * dg0 {
                return Some(f);
            }
            if dg * (a_hi - a_lo) >= 0.0 {
                hi = lo;
            }
            lo = (alpha, f, dg);
        }
    }
    // Fall back to the best sufficient-decrease point seen, if it moved.
    if lo.0 > 0.0 && lo.1 < f0 {
        let (f, _) = probe(lo.0, x_out, g_out, obj);
        if f.is_finite() {
            return Some(f);
        }
    }
    None
}
