//! Hazard, baseline prior, normalizer and the quadrature log-likelihood.
//!
//! The hazard is `λ(t | x) = φ t^{ρ−1} / Z(t, x) · σ(g(t, x; θ))`, with the
//! normalizer `Z(t, x) = σ(g(t, x; 0) / √(1 + π/8 ‖J_0(t, x)‖²))` evaluated
//! once per quadrature point. For any bias-carrying ReLU network `g(·; 0) = 0`
//! and `Z ≡ ½`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::net::{MlpModel, NetError};
use crate::numkit::{sigmoid, EvalPoints, GridError, QuadratureGrid, RngStream, SampleError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("non-finite {term} for observation {index}")]
    NonFinite { index: usize, term: &'static str },
    #[error("negative time {0}")]
    NegativeTime(f64),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Sample(#[from] SampleError),
}

/// Gamma(α0, β0) prior on the baseline scale φ and the Weibull power ρ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselinePrior {
    pub alpha0: f64,
    pub beta0: f64,
    pub rho: f64,
}

impl Default for BaselinePrior {
    fn default() -> Self {
        Self { alpha0: 1.0, beta0: 1.0, rho: 1.0 }
    }
}

impl BaselinePrior {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [("alpha0", self.alpha0), ("beta0", self.beta0), ("rho", self.rho)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(ModelError::InvalidPrior(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    /// Prior mean of φ.
    pub fn phi_mean(&self) -> f64 {
        self.alpha0 / self.beta0
    }

    /// `t^{ρ−1}`, with `t` floored at `floor` when ρ < 1.
    pub fn time_power(&self, t: f64, floor: f64) -> f64 {
        if self.rho == 1.0 {
            1.0
        } else if self.rho < 1.0 {
            t.max(floor).powf(self.rho - 1.0)
        } else {
            t.powf(self.rho - 1.0)
        }
    }
}

/// `Z(t, x)` for the input `[t, x...]`, expanding around θ = 0.
pub fn normalizer_z(model: &MlpModel, input: &[f64]) -> Result<f64, NetError> {
    let zero = vec![0.0; model.n_params()];
    let (g0, j0) = model.jacobian(input, &zero)?;
    let norm2: f64 = j0.iter().map(|v| v * v).sum();
    Ok(sigmoid(g0 / (1.0 + PI / 8.0 * norm2).sqrt()))
}

/// `φ t^{ρ−1}/Z · σ(g)` at a single time, with the ρ < 1 floor `floor`.
pub fn hazard_value(prior: &BaselinePrior, phi: f64, t: f64, z: f64, g: f64, floor: f64) -> Result<f64, ModelError> {
    if t < 0.0 {
        return Err(ModelError::NegativeTime(t));
    }
    Ok(phi * prior.time_power(t, floor) / z * sigmoid(g))
}

/// Per-point normalizer and baseline factor `t^{ρ−1}/Z` on a set of
/// quadrature points.
#[derive(Debug, Clone)]
pub struct HazardContext {
    prior: BaselinePrior,
    points: EvalPoints,
    z: Vec<f64>,
    base: Vec<f64>,
    base_integrals: Vec<f64>,
}

impl HazardContext {
    pub fn new(
        model: &MlpModel,
        grid: &QuadratureGrid,
        covariates: &[Vec<f64>],
        prior: BaselinePrior,
    ) -> Result<Self, ModelError> {
        let t_max = grid.nodes().last().copied().unwrap_or(1.0);
        Self::from_points(model, grid.eval_points(covariates), prior, t_max)
    }

    /// `t_max` sets the floor `1e-12·t_max` applied to `t` when ρ < 1.
    pub fn from_points(
        model: &MlpModel,
        points: EvalPoints,
        prior: BaselinePrior,
        t_max: f64,
    ) -> Result<Self, ModelError> {
        prior.validate()?;
        if points.dim != model.input_dim() {
            return Err(NetError::DimensionMismatch {
                what: "network input",
                expected: model.input_dim(),
                got: points.dim,
            }
            .into());
        }
        let z = exec::map_indexed(points.len(), |p| normalizer_z(model, points.input(p)))
            .into_iter()
            .collect::<Result<Vec<_>, _>>()?;
        let floor = 1e-12 * t_max;
        let base: Vec<f64> = points.times.iter().zip(&z).map(|(&t, &zp)| prior.time_power(t, floor) / zp).collect();
        let base_integrals = (0..points.n_observations())
            .map(|i| points.range(i).map(|p| points.weights[p] * base[p]).sum())
            .collect();
        Ok(Self { prior, points, z, base, base_integrals })
    }

    pub fn prior(&self) -> &BaselinePrior {
        &self.prior
    }

    pub fn points(&self) -> &EvalPoints {
        &self.points
    }

    pub fn n_observations(&self) -> usize {
        self.points.n_observations()
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    /// `t_p^{ρ−1} / Z_p` per point.
    pub fn base(&self) -> &[f64] {
        &self.base
    }

    /// `∫_0^{y_i} t^{ρ−1}/Z dt` by the observation's trapezoid rule.
    pub fn base_integral(&self, i: usize) -> f64 {
        self.base_integrals[i]
    }

    pub fn total_base_integral(&self) -> f64 {
        self.base_integrals.iter().sum()
    }

    /// Hazard at point `p` given the network output `g` there.
    pub fn hazard(&self, phi: f64, g: f64, p: usize) -> f64 {
        phi * self.base[p] * sigmoid(g)
    }

    /// `Σ_i δ_i log λ(y_i) − ∫_0^{y_i} λ dt` with `g` given at every point.
    pub fn log_likelihood(&self, phi: f64, g: &[f64], events: &[bool]) -> Result<f64, ModelError> {
        let terms = exec::map_indexed(self.n_observations(), |i| {
            let range = self.points.range(i);
            let integral: f64 = range.clone().map(|p| self.points.weights[p] * self.hazard(phi, g[p], p)).sum();
            let end = self.points.end_index(i);
            let event = if events[i] { self.hazard(phi, g[end], end).ln() } else { 0.0 };
            let v = event - integral;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(ModelError::NonFinite { index: i, term: "log-likelihood" })
            }
        });
        let mut total = 0.0;
        for t in terms {
            total += t?;
        }
        Ok(total)
    }

    /// One draw of the marked process on `[0, y_i]` with intensity
    /// `φ t^{ρ−1}/Z` and PG(1, 0) marks. See [`sample_marked_pp`].
    pub fn sample_marked_pp(&self, phi: f64, i: usize, rng: &mut RngStream) -> Result<Vec<(f64, f64)>, ModelError> {
        let range = self.points.range(i);
        sample_marked_pp(&self.points.times[range.clone()], &self.base[range], phi, rng, PG_SERIES_TERMS)
    }
}

/// Terms kept in the PG(1, c) series sampler.
pub const PG_SERIES_TERMS: usize = 2000;

/// Marked Poisson process on `[times[0], times[last]]` whose intensity is
/// `φ` times the piecewise-linear interpolant of `base` over `times`.
///
/// The count is Poisson with the trapezoid integral as mean; locations are
/// drawn by inverting the piecewise-quadratic cumulative intensity; marks are
/// PG(1, 0) draws from the series truncated at `terms`.
pub fn sample_marked_pp(
    times: &[f64],
    base: &[f64],
    phi: f64,
    rng: &mut RngStream,
    terms: usize,
) -> Result<Vec<(f64, f64)>, ModelError> {
    if !(phi > 0.0) {
        return Err(ModelError::InvalidPrior(format!("phi must be positive, got {phi}")));
    }
    let areas: Vec<f64> = times.windows(2).zip(base.windows(2)).map(|(t, b)| 0.5 * (b[0] + b[1]) * (t[1] - t[0])).collect();
    let total: f64 = areas.iter().sum();
    let count = rng.poisson_count(phi * total)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut u = rng.uniform() * total;
        let mut k = 0;
        while k + 1 < areas.len() && u >= areas[k] {
            u -= areas[k];
            k += 1;
        }
        let (t0, t1) = (times[k], times[k + 1]);
        let (b0, b1) = (base[k], base[k + 1]);
        let h = t1 - t0;
        // Solve b0 s + (b1 − b0) s² / (2h) = u for s ∈ [0, h].
        let slope = (b1 - b0) / h;
        let s = if slope.abs() < 1e-12 * (b0.abs() + b1.abs()) {
            u / b0
        } else {
            let disc = (b0 * b0 + 2.0 * slope * u).max(0.0);
            2.0 * u / (b0 + disc.sqrt())
        };
        let t = t0 + s.clamp(0.0, h);
        out.push((t, rng.polya_gamma_truncated(0.0, terms)));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}
