//! EM for the MAP estimate of `(θ, φ)` in the augmented model.
//!
//! The E-step refreshes the Pólya–Gamma parameters of the event marks,
//! `c̆_i = δ_i |g(y_i)|`, and the intensity of the latent marked process,
//! `λ̆(t) = φ t^{ρ−1}/Z · σ(−g(t))`. The M-step maximizes
//!
//! ```text
//! Q(θ, φ) = Σ_i δ_i (g_i/2 − ω̄_i g_i²/2)
//!         − ½ Σ_p w_p λ̆_p (g_p + κ̆_p g_p²) − ½ θᵀθ
//!         + a log φ − b φ
//! ```
//!
//! with `ω̄_i = E[PG(1, c̆_i)]`, `κ̆_p = E[PG(1, |ğ_p|)]`,
//! `a = α0 − 1 + Σ_i (δ_i + ∫ λ̆_i)` and `b = β0 + Σ_i ∫ t^{ρ−1}/Z`.
//! Constant terms are dropped, so Q values only compare within one E-step.
//! The quadrature log-posterior, which EM increases monotonically, is
//! tracked alongside.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::model::{HazardContext, ModelError};
use crate::net::MlpModel;
use crate::numkit::{pg_mean, sigmoid, RngStream};
use crate::optim::{self, LbfgsConfig, OptimError, Termination};

#[derive(Debug, Error)]
pub enum EmError {
    #[error("no observations")]
    Empty,
    #[error("events vector has {got} entries for {expected} observations")]
    EventCount { expected: usize, got: usize },
    #[error("non-finite {term} in the Q-function")]
    NonFinite { term: &'static str },
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Relative change of the log-posterior counted as converged.
    pub rel_tol: f64,
    /// Consecutive iterations below `rel_tol` required.
    pub patience: usize,
    pub inner_max_iter: usize,
    pub memory: usize,
    /// Scale of the He-style initial draw of θ.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { max_iter: 500, rel_tol: 1e-6, patience: 2, inner_max_iter: 100, memory: 10, init_scale: 1.0, seed: 0 }
    }
}

impl EmConfig {
    fn lbfgs(&self) -> LbfgsConfig {
        LbfgsConfig { memory: self.memory, max_iter: self.inner_max_iter, grad_tol: 1e-6, ..Default::default() }
    }
}

/// Quantities fixed by one E-step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latents {
    /// `c̆_i`, zero for censored observations.
    pub c: Vec<f64>,
    /// `E[ω_i] = pg_mean(1, c̆_i)`.
    pub omega: Vec<f64>,
    /// `λ̆_p` at every quadrature point.
    pub lambda: Vec<f64>,
    /// `E[ω | t_p] = pg_mean(1, |ğ_p|)` for the latent marks.
    pub kappa: Vec<f64>,
    /// Shape coefficient `a` of the φ terms.
    pub a: f64,
    /// Rate coefficient `b` of the φ terms.
    pub b: f64,
}

impl Latents {
    /// Maximizer of `a log φ − b φ`.
    pub fn phi_closed_form(&self) -> f64 {
        self.a / self.b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmState {
    pub theta: Vec<f64>,
    pub phi: f64,
    pub latents: Latents,
    pub iteration: usize,
    /// Relative log-posterior changes of the last two iterations.
    pub last_changes: [f64; 2],
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmTraceEntry {
    pub iteration: usize,
    /// `Q_ℓ` at the iterate the M-step started from.
    pub q_before: f64,
    /// `Q_ℓ` at the iterate the M-step returned.
    pub q_after: f64,
    /// Quadrature log-posterior at the returned iterate.
    pub log_posterior: f64,
    pub phi: f64,
    pub theta_norm: f64,
    pub inner_iterations: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    pub entries: Vec<EmTraceEntry>,
}

impl EmTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    /// Largest drop `q_before − q_after` over all M-steps.
    pub fn worst_m_step_drop(&self) -> f64 {
        self.entries.iter().map(|e| e.q_before - e.q_after).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest drop of the log-posterior between successive iterations.
    pub fn worst_objective_drop(&self, initial: f64) -> f64 {
        let mut prev = initial;
        let mut worst = f64::NEG_INFINITY;
        for e in &self.entries {
            worst = worst.max(prev - e.log_posterior);
            prev = e.log_posterior;
        }
        worst
    }
}

/// The data side of the EM problem: network, quadrature context, event flags.
#[derive(Debug, Clone, Copy)]
pub struct EmProblem<'a> {
    pub model: &'a MlpModel,
    pub ctx: &'a HazardContext,
    pub events: &'a [bool],
}

impl<'a> EmProblem<'a> {
    pub fn new(model: &'a MlpModel, ctx: &'a HazardContext, events: &'a [bool]) -> Result<Self, EmError> {
        let n = ctx.n_observations();
        if n == 0 {
            return Err(EmError::Empty);
        }
        if events.len() != n {
            return Err(EmError::EventCount { expected: n, got: events.len() });
        }
        Ok(Self { model, ctx, events })
    }

    fn outputs(&self, theta: &[f64]) -> Vec<f64> {
        self.model.outputs(&self.ctx.points().inputs, theta)
    }

    /// E-step at `(θ, φ)`.
    pub fn latent_update(&self, theta: &[f64], phi: f64) -> Latents {
        self.latents_from_outputs(&self.outputs(theta), phi)
    }

    fn latents_from_outputs(&self, g: &[f64], phi: f64) -> Latents {
        let pts = self.ctx.points();
        let n = pts.n_observations();
        let c: Vec<f64> =
            (0..n).map(|i| if self.events[i] { g[pts.end_index(i)].abs() } else { 0.0 }).collect();
        let omega = c.iter().map(|&ci| pg_mean(1.0, ci)).collect();
        let base = self.ctx.base();
        let lambda: Vec<f64> = g.iter().zip(base).map(|(&gp, &bp)| phi * bp * sigmoid(-gp)).collect();
        let kappa = g.iter().map(|&gp| pg_mean(1.0, gp.abs())).collect();
        let prior = self.ctx.prior();
        let n_events = self.events.iter().filter(|&&d| d).count() as f64;
        let lambda_mass: f64 = (0..n).map(|i| pts.range(i).map(|p| pts.weights[p] * lambda[p]).sum::<f64>()).sum();
        let a = prior.alpha0 - 1.0 + n_events + lambda_mass;
        let b = prior.beta0 + self.ctx.total_base_integral();
        Latents { c, omega, lambda, kappa, a, b }
    }

    /// θ-part of Q from the network outputs at every point.
    fn q_theta_from_outputs(&self, lat: &Latents, g: &[f64], theta: &[f64]) -> Result<f64, EmError> {
        let pts = self.ctx.points();
        let n = pts.n_observations();
        let mut event = 0.0;
        let mut intensity = 0.0;
        for i in 0..n {
            if self.events[i] {
                let ge = g[pts.end_index(i)];
                event += ge / 2.0 - lat.omega[i] * ge * ge / 2.0;
            }
            for p in pts.range(i) {
                intensity += pts.weights[p] * lat.lambda[p] * (g[p] + lat.kappa[p] * g[p] * g[p]);
            }
        }
        if !event.is_finite() {
            return Err(EmError::NonFinite { term: "event term" });
        }
        if !intensity.is_finite() {
            return Err(EmError::NonFinite { term: "intensity integral" });
        }
        let prior = 0.5 * theta.iter().map(|v| v * v).sum::<f64>();
        Ok(event - 0.5 * intensity - prior)
    }

    fn q_phi(lat: &Latents, phi: f64) -> f64 {
        lat.a * phi.ln() - lat.b * phi
    }

    pub fn q_function(&self, lat: &Latents, theta: &[f64], phi: f64) -> Result<f64, EmError> {
        let g = self.outputs(theta);
        let q = self.q_theta_from_outputs(lat, &g, theta)? + Self::q_phi(lat, phi);
        if q.is_finite() {
            Ok(q)
        } else {
            Err(EmError::NonFinite { term: "baseline term" })
        }
    }

    /// Q and its gradient with respect to θ.
    pub fn q_theta_and_gradient(&self, lat: &Latents, theta: &[f64]) -> Result<(f64, Vec<f64>), EmError> {
        let pts = self.ctx.points();
        let owner = &pts.owner;
        let (g, mut grad) = self.model.outputs_and_gradient(&pts.inputs, theta, |p, gp| {
            let i = owner[p];
            let mut c = -0.5 * pts.weights[p] * lat.lambda[p] * (1.0 + 2.0 * lat.kappa[p] * gp);
            if self.events[i] && p == pts.end_index(i) {
                c += 0.5 - lat.omega[i] * gp;
            }
            c
        });
        for (gr, &t) in grad.iter_mut().zip(theta) {
            *gr -= t;
        }
        Ok((self.q_theta_from_outputs(lat, &g, theta)?, grad))
    }

    /// Quadrature log-posterior up to an additive constant.
    pub fn log_posterior(&self, theta: &[f64], phi: f64) -> Result<f64, EmError> {
        let g = self.outputs(theta);
        let ll = self.ctx.log_likelihood(phi, &g, self.events)?;
        let prior = self.ctx.prior();
        let lp = ll - 0.5 * theta.iter().map(|v| v * v).sum::<f64>() + (prior.alpha0 - 1.0) * phi.ln() - prior.beta0 * phi;
        if lp.is_finite() {
            Ok(lp)
        } else {
            Err(EmError::NonFinite { term: "log-posterior" })
        }
    }

    /// Maximizes Q over `(θ, log φ)` starting from `(θ, φ)`.
    pub fn m_step(&self, lat: &Latents, theta: &[f64], phi: f64, config: &EmConfig) -> Result<MStep, EmError> {
        let m = theta.len();
        let mut x0 = theta.to_vec();
        x0.push(phi.ln());
        let mut failure: Option<EmError> = None;
        let objective = |x: &[f64], grad: &mut [f64]| -> f64 {
            let (theta, u) = (&x[..m], x[m]);
            match self.q_theta_and_gradient(lat, theta) {
                Ok((q, gq)) => {
                    let phi = u.exp();
                    for (o, v) in grad[..m].iter_mut().zip(gq) {
                        *o = -v;
                    }
                    grad[m] = -(lat.a - lat.b * phi);
                    -(q + Self::q_phi(lat, phi))
                }
                Err(e) => {
                    failure.get_or_insert(e);
                    grad.iter_mut().for_each(|v| *v = f64::NAN);
                    f64::NAN
                }
            }
        };
        let res = optim::minimize(objective, &x0, &config.lbfgs());
        let res = match (res, failure) {
            (Err(_), Some(e)) => return Err(e),
            (r, _) => r?,
        };
        // Q separates in θ and φ, so the φ coordinate can be finished exactly.
        let phi = lat.phi_closed_form();
        let q = -res.f - Self::q_phi(lat, res.x[m].exp()) + Self::q_phi(lat, phi);
        let mut theta = res.x;
        theta.truncate(m);
        Ok(MStep { theta, phi, q, inner_iterations: res.iterations, termination: res.termination })
    }

    /// Maximizes the φ terms of Q alone by L-BFGS over log φ.
    pub fn maximize_phi(lat: &Latents, phi0: f64, config: &EmConfig) -> Result<f64, EmError> {
        let objective = |x: &[f64], grad: &mut [f64]| {
            let phi = x[0].exp();
            grad[0] = -(lat.a - lat.b * phi);
            -Self::q_phi(lat, phi)
        };
        let res = optim::minimize(objective, &[phi0.ln()], &config.lbfgs())?;
        Ok(res.x[0].exp())
    }
}

#[derive(Debug, Clone)]
pub struct MStep {
    pub theta: Vec<f64>,
    pub phi: f64,
    pub q: f64,
    pub inner_iterations: usize,
    pub termination: Termination,
}

#[derive(Debug, Clone)]
pub struct EmResult {
    pub state: EmState,
    pub trace: EmTrace,
    /// Log-posterior at the initial iterate.
    pub initial_log_posterior: f64,
}

/// Initial iterate: a seeded small random θ and φ at its prior mean.
pub fn initial_theta(model: &MlpModel, config: &EmConfig) -> Vec<f64> {
    let mut rng = RngStream::new(config.seed);
    model.init_params(&mut rng, config.init_scale)
}

/// Alternates E- and M-steps until the log-posterior settles.
pub fn run_em(problem: &EmProblem<'_>, config: &EmConfig) -> Result<EmResult, EmError> {
    let theta0 = initial_theta(problem.model, config);
    run_em_from(problem, theta0, problem.ctx.prior().phi_mean(), config)
}

pub fn run_em_from(problem: &EmProblem<'_>, theta: Vec<f64>, phi: f64, config: &EmConfig) -> Result<EmResult, EmError> {
    let mut theta = theta;
    let mut phi = phi;
    let initial = problem.log_posterior(&theta, phi)?;
    let mut prev = initial;
    let mut trace = EmTrace::default();
    let mut changes = [f64::INFINITY; 2];
    let mut below = 0;
    let mut converged = false;
    let mut latents = problem.latent_update(&theta, phi);
    let mut iteration = 0;
    while iteration < config.max_iter {
        iteration += 1;
        let q_before = problem.q_function(&latents, &theta, phi)?;
        let step = problem.m_step(&latents, &theta, phi, config)?;
        theta = step.theta;
        phi = step.phi;
        let lp = problem.log_posterior(&theta, phi)?;
        let change = (lp - prev).abs() / prev.abs().max(1.0);
        changes = [changes[1], change];
        trace.entries.push(EmTraceEntry {
            iteration,
            q_before,
            q_after: step.q,
            log_posterior: lp,
            phi,
            theta_norm: theta.iter().map(|v| v * v).sum::<f64>().sqrt(),
            inner_iterations: step.inner_iterations,
        });
        log::debug!("em iteration {iteration}: log-posterior {lp:.6}, phi {phi:.6}, change {change:.3e}");
        prev = lp;
        latents = problem.latent_update(&theta, phi);
        below = if change < config.rel_tol { below + 1 } else { 0 };
        if below >= config.patience {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("EM stopped after {iteration} iterations without meeting the tolerance");
    }
    let state = EmState { theta, phi, latents, iteration, last_changes: changes, converged };
    Ok(EmResult { state, trace, initial_log_posterior: initial })
}

/// Per-observation log-posterior contributions, for diagnostics.
pub fn observation_terms(problem: &EmProblem<'_>, theta: &[f64], phi: f64) -> Vec<f64> {
    let g = problem.outputs(theta);
    let pts = problem.ctx.points();
    exec::map_indexed(pts.n_observations(), |i| {
        let integral: f64 = pts.range(i).map(|p| pts.weights[p] * problem.ctx.hazard(phi, g[p], p)).sum();
        let end = pts.end_index(i);
        let event = if problem.events[i] { problem.ctx.hazard(phi, g[end], end).ln() } else { 0.0 };
        event - integral
    })
}
