//! Numerical self-checks shared by the `selftest` command and the acceptance
//! suite. Each check reports the observed statistic next to its tolerance.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::cavi::{LowRankFactor, SigmaStorage};
use crate::data::{gen_synthetic, Normalization};
use crate::map_em::{run_em, EmConfig, EmProblem};
use crate::model::{sample_marked_pp, HazardContext};
use crate::net::MlpModel;
use crate::numkit::{digamma, pg_f, pg_mean, sigmoid, QuadratureGrid, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    /// Observed statistic; the check passes when it is at most `tolerance`.
    pub observed: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, observed: f64, tolerance: f64) -> Self {
        Self { name: name.into(), observed, tolerance, passed: observed <= tolerance }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Options {
    pub pg_draws: usize,
    pub jacobian_points: usize,
    pub augmentation_configs: usize,
    pub augmentation_draws: usize,
    pub pg_terms: usize,
    pub em_subjects: usize,
    /// Test hook: negate the analytic Jacobian before comparing.
    pub flip_jacobian_sign: bool,
    pub seed: u64,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            pg_draws: 20_000,
            jacobian_points: 100,
            augmentation_configs: 5,
            augmentation_draws: 20_000,
            pg_terms: 200,
            em_subjects: 25,
            flip_jacobian_sign: false,
            seed: 0,
        }
    }
}

pub fn run_all(opts: &Options) -> Vec<Check> {
    let mut out = pg_moments(&[0.1, 1.0, 5.0], opts.pg_draws, opts.pg_terms, opts.seed);
    out.push(jacobian_fd(opts.jacobian_points, opts.seed, opts.flip_jacobian_sign));
    out.push(digamma_recurrence(1000, opts.seed));
    out.extend(woodbury(&[(120, 30), (300, 50)]));
    out.extend(augmentation_mc(opts.augmentation_configs, opts.augmentation_draws, opts.pg_terms, opts.seed));
    out.extend(em_ascent(opts.em_subjects, opts.seed));
    out
}

/// Sample mean of truncated-series PG(1, c) draws against `pg_mean`, in
/// standard errors.
pub fn pg_moments(cs: &[f64], draws: usize, terms: usize, seed: u64) -> Vec<Check> {
    cs.iter()
        .enumerate()
        .map(|(k, &c)| {
            let mut rng = RngStream::new(seed).derive(k as u64);
            let xs: Vec<f64> = (0..draws).map(|_| rng.polya_gamma_truncated(c, terms)).collect();
            let n = draws as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let z = (mean - pg_mean(1.0, c)).abs() / (var / n).sqrt();
            Check::new(format!("pg_mean c={c} (standard errors)"), z, 3.0)
        })
        .collect()
}

fn near_kink(model: &MlpModel, input: &[f64], theta: &[f64], eps: f64) -> bool {
    let layers = model.unflatten(theta).expect("theta matches model");
    let mut a = DVector::from_column_slice(input);
    for layer in &layers[..layers.len() - 1] {
        let z = &layer.weights * &a + &layer.bias;
        if z.iter().any(|v| v.abs() < eps) {
            return true;
        }
        a = z.map(|v| v.max(0.0));
    }
    false
}

/// Worst ratio of |FD − analytic| to `max(1e-6, 1e-4·|analytic|)` over
/// `points` random (input, θ) pairs away from ReLU kinks.
pub fn jacobian_fd(points: usize, seed: u64, flip_sign: bool) -> Check {
    let model = MlpModel::default_for(4);
    let mut rng = RngStream::new(seed).derive(100);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < points {
        let theta: Vec<f64> = model.init_params(&mut rng, 1.0).iter().map(|v| v + 0.2 * rng.standard_normal()).collect();
        let mut input = vec![rng.uniform()];
        input.extend((0..4).map(|_| rng.standard_normal()));
        if near_kink(&model, &input, &theta, 1e-3) {
            continue;
        }
        let (_, mut grad) = model.jacobian(&input, &theta).expect("valid input");
        if flip_sign {
            grad.iter_mut().for_each(|g| *g = -*g);
        }
        let mut tp = theta.clone();
        for j in 0..theta.len() {
            tp[j] = theta[j] + h;
            let up = model.forward(&input, &tp).expect("valid input");
            tp[j] = theta[j] - h;
            let dn = model.forward(&input, &tp).expect("valid input");
            tp[j] = theta[j];
            let fd = (up - dn) / (2.0 * h);
            worst = worst.max((fd - grad[j]).abs() / f64::max(1e-6, 1e-4 * grad[j].abs()));
        }
        checked += 1;
    }
    Check::new(format!("jacobian vs central FD, {points} points (error / tolerance)"), worst, 1.0)
}

/// Largest |ψ(x+1) − ψ(x) − 1/x| over random x in (0.01, 50).
pub fn digamma_recurrence(n: usize, seed: u64) -> Check {
    let mut rng = RngStream::new(seed).derive(200);
    let worst = (0..n)
        .map(|_| {
            let x = 0.01 + 50.0 * rng.uniform();
            let lhs = digamma(x + 1.0).expect("positive") - digamma(x).expect("positive");
            (lhs - 1.0 / x).abs()
        })
        .fold(0.0, f64::max);
    Check::new("digamma recurrence", worst, 1e-10)
}

fn random_factor(m: usize, r: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
    let mut rng = RngStream::new(seed);
    let u = DMatrix::from_fn(m, r, |_, _| rng.standard_normal());
    let c = (0..r).map(|_| rng.uniform() * 2.0).collect();
    (u, c)
}

/// Relative Frobenius error of the factor-form inverse against a dense one.
pub fn woodbury(cases: &[(usize, usize)]) -> Vec<Check> {
    cases
        .iter()
        .map(|&(m, r)| {
            let (u, c) = random_factor(m, r, m as u64);
            let f = LowRankFactor { u: &u, c: &c };
            let want = f.dense_inverse();
            let got = f.inverse(SigmaStorage::Factor, 0).expect("positive definite").to_dense();
            Check::new(format!("woodbury m={m} R={r} (relative Frobenius)"), (got - &want).norm() / want.norm(), 1e-8)
        })
        .collect()
}

/// Fastest of `repeats` wall times of one factor-form θ update (right-hand side, inverse
/// and `Σ̃ rhs`) at each `m` for fixed `r`, and the log-log slope of time
/// against `m`.
pub fn woodbury_scaling(ms: &[usize], r: usize, repeats: usize) -> (Vec<f64>, f64) {
    let secs: Vec<f64> = ms
        .iter()
        .map(|&m| {
            let (u, c) = random_factor(m, r, 7);
            let theta = DVector::from_fn(m, |i, _| ((i % 17) as f64 - 8.0) / 8.0);
            let mut previous = None;
            (0..repeats)
                .map(|_| {
                    let start = Instant::now();
                    let offset = u.tr_mul(&theta);
                    let a = DVector::from_fn(r, |p, _| c[p] * offset[p] - 1.0);
                    let rhs = (&u * a) * 0.5;
                    let sigma = LowRankFactor { u: &u, c: &c }
                        .inverse_reusing(SigmaStorage::Factor, 0, previous.take())
                        .expect("positive definite");
                    std::hint::black_box(sigma.mul_vec(&rhs));
                    let secs = start.elapsed().as_secs_f64();
                    previous = Some(sigma);
                    secs
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let xs: Vec<f64> = ms.iter().map(|&m| (m as f64).ln()).collect();
    let ys: Vec<f64> = secs.iter().map(|s| s.ln()).collect();
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    (secs, sxy / sxx)
}

/// One random configuration of the augmentation identity: intensity
/// `φ·b̄(t)` on `[0, y]` with `b̄` piecewise linear, and a linear `g(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationCase {
    pub phi: f64,
    pub times: Vec<f64>,
    pub base: Vec<f64>,
    pub g0: f64,
    pub g1: f64,
}

impl AugmentationCase {
    pub fn random(rng: &mut RngStream) -> Self {
        let y = 0.5 + 1.5 * rng.uniform();
        let nodes = 9;
        let times = (0..nodes).map(|k| y * k as f64 / (nodes - 1) as f64).collect();
        let base = (0..nodes).map(|_| 0.5 + 2.0 * rng.uniform()).collect();
        Self { phi: 0.2 + 0.8 * rng.uniform(), times, base, g0: 4.0 * rng.uniform() - 2.0, g1: 4.0 * rng.uniform() - 2.0 }
    }

    pub fn g(&self, t: f64) -> f64 {
        self.g0 + self.g1 * t
    }

    /// `exp(−φ ∫ b̄(t) σ(g(t)) dt)` by composite Simpson on each segment.
    pub fn exact(&self) -> f64 {
        let sub = 200;
        let mut total = 0.0;
        for k in 0..self.times.len() - 1 {
            let (t0, t1) = (self.times[k], self.times[k + 1]);
            let (b0, b1) = (self.base[k], self.base[k + 1]);
            let h = (t1 - t0) / sub as f64;
            let f = |s: f64| (b0 + (b1 - b0) * (s - t0) / (t1 - t0)) * sigmoid(self.g(s));
            let mut acc = f(t0) + f(t1);
            for j in 1..sub {
                acc += if j % 2 == 1 { 4.0 } else { 2.0 } * f(t0 + j as f64 * h);
            }
            total += acc * h / 3.0;
        }
        (-self.phi * total).exp()
    }

    /// Monte Carlo mean of `Π_k exp(f(ω_k, −g(t_k)))` over sampled marked
    /// processes.
    pub fn monte_carlo(&self, draws: usize, terms: usize, rng: &mut RngStream) -> f64 {
        let mut acc = 0.0;
        for _ in 0..draws {
            let pts = sample_marked_pp(&self.times, &self.base, self.phi, rng, terms).expect("positive phi");
            acc += pts.iter().map(|&(t, w)| pg_f(w, -self.g(t))).sum::<f64>().exp();
        }
        acc / draws as f64
    }
}

/// Relative error of the Monte Carlo augmented expectation.
pub fn augmentation_mc(configs: usize, draws: usize, terms: usize, seed: u64) -> Vec<Check> {
    let mut rng = RngStream::new(seed).derive(300);
    (0..configs)
        .map(|k| {
            let case = AugmentationCase::random(&mut rng);
            let mut mc_rng = rng.derive(k as u64);
            let mc = case.monte_carlo(draws, terms, &mut mc_rng);
            let exact = case.exact();
            Check::new(format!("augmentation config {k}, {draws} draws (relative error)"), (mc / exact - 1.0).abs(), 0.01)
        })
        .collect()
}

/// EM on synthetic data: largest Q drop within an M-step, largest drop of the
/// log-posterior across iterations, and convergence within the cap.
pub fn em_ascent(n: usize, seed: u64) -> Vec<Check> {
    let data = gen_synthetic(n, &mut RngStream::new(seed)).expect("valid size");
    let norm = Normalization::fit(&data).apply(&data);
    let model = MlpModel::default_for(data.n_features());
    let grid = QuadratureGrid::build(norm.times(), 64).expect("positive times");
    let ctx = HazardContext::new(&model, &grid, norm.covariates(), Default::default()).expect("valid prior");
    let problem = EmProblem::new(&model, &ctx, norm.events()).expect("matching sizes");
    let config = EmConfig { seed, ..EmConfig::default() };
    let res = match run_em(&problem, &config) {
        Ok(r) => r,
        Err(e) => {
            log::error!("EM failed: {e}");
            return vec![Check::new("EM run", f64::INFINITY, 0.0)];
        }
    };
    vec![
        Check::new("EM Q drop within M-steps", res.trace.worst_m_step_drop(), 1e-8),
        Check::new("EM log-posterior drop across iterations", res.trace.worst_objective_drop(res.initial_log_posterior), 1e-8),
        Check::new(
            format!("EM iterations to convergence, N={n}"),
            if res.state.converged { res.state.iteration as f64 } else { f64::INFINITY },
            config.max_iter as f64,
        ),
    ]
}
