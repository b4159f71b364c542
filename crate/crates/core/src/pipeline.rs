//! End-to-end fit: normalization, MAP by EM, linearization, CAVI.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cavi::{run_cavi, CaviConfig, CaviError, CaviProblem, CaviTrace};
use crate::data::{DataError, Dataset, Normalization};
use crate::exec;
use crate::map_em::{run_em, EmConfig, EmError, EmProblem, EmTrace};
use crate::model::{BaselinePrior, HazardContext, ModelError};
use crate::net::{LinearizedModel, MlpModel, NetError};
use crate::numkit::{GridError, QuadratureGrid, RngStream};
use crate::predict::{draw_parameters, survival_from_draws, ParamPosterior, PosteriorSurvival, PredictError};

#[derive(Debug, Error)]
pub enum FitError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("EM: {0}")]
    Em(#[from] EmError),
    #[error("CAVI: {0}")]
    Cavi(#[from] CaviError),
    #[error(transparent)]
    Predict(#[from] PredictError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub seed: u64,
    /// Number of shared quadrature nodes.
    pub grid_size: usize,
    pub hidden: Vec<usize>,
    pub prior: BaselinePrior,
    pub em: EmConfig,
    pub cavi: CaviConfig,
    /// Posterior draws used for prediction.
    pub draws: usize,
    /// Credible level of prediction bands.
    pub level: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid_size: 64,
            hidden: vec![16, 16],
            prior: BaselinePrior::default(),
            em: EmConfig::default(),
            cavi: CaviConfig::default(),
            draws: crate::predict::DEFAULT_DRAWS,
            level: crate::predict::DEFAULT_LEVEL,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |msg: &str| Err(FitError::Config(msg.to_string()));
        if self.grid_size < 2 {
            return bad("grid_size must be at least 2");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive");
        }
        if !(self.em.rel_tol > 0.0) || !(self.cavi.rel_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if self.em.max_iter == 0 || self.cavi.max_iter == 0 || self.em.patience == 0 {
            return bad("iteration caps and patience must be positive");
        }
        if !(self.cavi.init_sigma_scale > 0.0) || !self.cavi.init_sigma_scale.is_finite() {
            return bad("init_sigma_scale must be positive");
        }
        if self.draws < 2 {
            return bad("draws must be at least 2");
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad("level must lie strictly between 0 and 1");
        }
        self.prior.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Everything prediction needs from a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Posterior {
    pub model: MlpModel,
    pub theta_map: Vec<f64>,
    pub phi_map: f64,
    pub params: ParamPosterior,
    pub prior: BaselinePrior,
    pub normalization: Normalization,
}

impl Posterior {
    /// Sampled curves for raw covariates at times in original units. Every
    /// subject shares the same parameter draws.
    pub fn predict(
        &self,
        covariates: &[Vec<f64>],
        times: &[f64],
        n_draws: usize,
        seed: u64,
    ) -> Result<Vec<PosteriorSurvival>, PredictError> {
        let draws = draw_parameters(&self.params, n_draws, &RngStream::new(seed))?;
        let t: Vec<f64> = times.iter().map(|&v| self.normalization.time(v)).collect();
        exec::map_indexed(covariates.len(), |i| {
            let x = self.normalization.covariates(&covariates[i]);
            survival_from_draws(&self.model, &self.theta_map, &self.prior, &draws, &x, &t)
        })
        .into_iter()
        .map(|r| {
            r.map(|mut s| {
                s.times = times.to_vec();
                s
            })
        })
        .collect()
    }

    /// Posterior-mean survival curves for evaluation.
    pub fn mean_curves(&self, covariates: &[Vec<f64>], times: &[f64], n_draws: usize, seed: u64) -> Result<CurveSet, PredictError> {
        let preds = self.predict(covariates, times, n_draws, seed)?;
        Ok(CurveSet { times: times.to_vec(), values: preds.iter().map(PosteriorSurvival::mean).collect() })
    }
}

/// Survival curves of many subjects on one grid, linearly interpolated and
/// held constant beyond the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSet {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl CurveSet {
    pub fn at(&self, i: usize, t: f64) -> f64 {
        let v = &self.values[i];
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            return v[0];
        }
        if k == self.times.len() {
            return v[k - 1];
        }
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        v[k - 1] + (t - t0) / (t1 - t0) * (v[k] - v[k - 1])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub n: usize,
    pub n_events: usize,
    pub n_points: usize,
    pub n_params: usize,
    pub em_iterations: usize,
    pub em_converged: bool,
    pub cavi_iterations: usize,
    pub cavi_converged: bool,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub posterior: Posterior,
    pub summary: FitSummary,
    pub em_trace: EmTrace,
    pub em_initial_log_posterior: f64,
    pub cavi_trace: CaviTrace,
    pub em_seconds: f64,
    pub cavi_seconds: f64,
}

impl FitResult {
    pub fn converged(&self) -> bool {
        self.summary.em_converged && self.summary.cavi_converged
    }
}

/// Fits the model to `data` in original units.
pub fn fit(data: &Dataset, config: &FitConfig) -> Result<FitResult, FitError> {
    config.validate()?;
    if data.n_events() == 0 {
        return Err(FitError::Config("data contain no events".into()));
    }
    let normalization = Normalization::fit(data);
    let norm = normalization.apply(data);
    let model = MlpModel::with_hidden(data.n_features(), &config.hidden)?;
    let grid = QuadratureGrid::build(norm.times(), config.grid_size)?;
    let ctx = HazardContext::new(&model, &grid, norm.covariates(), config.prior)?;

    let start = Instant::now();
    let em_config = EmConfig { seed: config.seed, ..config.em };
    let em = run_em(&EmProblem::new(&model, &ctx, norm.events())?, &em_config)?;
    let em_seconds = start.elapsed().as_secs_f64();
    log::info!("EM: {} iterations, converged {}, phi {:.6} in {em_seconds:.1}s", em.state.iteration, em.state.converged, em.state.phi);

    let start = Instant::now();
    let lin = LinearizedModel::linearize(&model, &em.state.theta, &ctx.points().inputs)?;
    let problem = CaviProblem::new(&lin, &ctx, norm.events())?;
    let (state, cavi_trace) = run_cavi(&problem, em.state.phi, &config.cavi)?;
    let cavi_seconds = start.elapsed().as_secs_f64();
    log::info!("CAVI: {} iterations, converged {}, E[phi] {:.6} in {cavi_seconds:.1}s", state.iteration, state.converged, state.phi_mean());

    let summary = FitSummary {
        n: data.len(),
        n_events: data.n_events(),
        n_points: ctx.points().len(),
        n_params: model.n_params(),
        em_iterations: em.state.iteration,
        em_converged: em.state.converged,
        cavi_iterations: state.iteration,
        cavi_converged: state.converged,
    };
    let posterior = Posterior {
        model,
        theta_map: em.state.theta.clone(),
        phi_map: em.state.phi,
        params: ParamPosterior::from_state(&state),
        prior: config.prior,
        normalization,
    };
    Ok(FitResult {
        posterior,
        summary,
        em_trace: em.trace,
        em_initial_log_posterior: em.initial_log_posterior,
        cavi_trace,
        em_seconds,
        cavi_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic;

    #[test]
    fn config_hash_tracks_content() {
        let a = FitConfig::default();
        let b = FitConfig { seed: 1, ..FitConfig::default() };
        assert_eq!(a.hash(), FitConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cases = [
            FitConfig { grid_size: 1, ..FitConfig::default() },
            FitConfig { level: 1.0, ..FitConfig::default() },
            FitConfig { hidden: vec![4, 0], ..FitConfig::default() },
            FitConfig { em: EmConfig { rel_tol: 0.0, ..EmConfig::default() }, ..FitConfig::default() },
        ];
        for c in cases {
            assert!(matches!(c.validate(), Err(FitError::Config(_))));
        }
    }

    #[test]
    fn curve_interpolation() {
        let c = CurveSet { times: vec![0.0, 1.0, 2.0], values: vec![vec![1.0, 0.5, 0.2]] };
        assert_eq!(c.at(0, -1.0), 1.0);
        assert_eq!(c.at(0, 0.5), 0.75);
        assert_eq!(c.at(0, 1.0), 0.5);
        assert_eq!(c.at(0, 9.0), 0.2);
    }

    #[test]
    fn small_fit_predicts_valid_curves() {
        let data = gen_synthetic(20, &mut RngStream::new(3)).unwrap();
        let config = FitConfig { hidden: vec![4], grid_size: 16, ..FitConfig::default() };
        let res = fit(&data, &config).unwrap();
        assert!(res.summary.cavi_converged);
        let times: Vec<f64> = (0..=20).map(|k| data.max_time() * k as f64 / 20.0).collect();
        let preds = res.posterior.predict(&data.covariates()[..3], &times, 50, 1).unwrap();
        for p in &preds {
            assert_eq!(p.times, times);
            assert!(p.curves.column(0).iter().all(|&v| v == 1.0));
            assert!(!p.extrapolated);
        }
    }
}
