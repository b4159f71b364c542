//! Posterior predictive survival curves and pointwise credible bands.
//!
//! A draw is `φ ~ Gamma(α̃, β̃)` and `θ ~ N(μ̃, Σ̃)`; its curve is
//! `S(t) = exp(−∫₀ᵗ φ s^{ρ−1}/Z · σ(g^lin(s, x; θ)) ds)` with the integral
//! taken by the trapezoid rule on the prediction grid.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::cavi::{cholesky_jitter, CaviError, SigmaRepr, VariationalState};
use crate::exec;
use crate::model::{normalizer_z, BaselinePrior};
use crate::net::{LinearizedModel, MlpModel, NetError};
use crate::numkit::{sigmoid, RngStream, SampleError};

pub const DEFAULT_DRAWS: usize = 200;
pub const DEFAULT_LEVEL: f64 = 0.9;
pub const MIN_BAND_DRAWS: usize = 20;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("need at least {min} posterior draws, got {got}")]
    TooFewDraws { min: usize, got: usize },
    #[error("credible level must lie strictly between 0 and 1, got {0}")]
    Level(f64),
    #[error("prediction times must be finite, non-negative and non-decreasing")]
    Times,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Cavi(#[from] CaviError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// The parameter factors of the variational posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamPosterior {
    pub alpha: f64,
    pub beta: f64,
    pub mu: DVector<f64>,
    pub sigma: SigmaRepr,
}

impl ParamPosterior {
    pub fn from_state(state: &VariationalState) -> Self {
        Self { alpha: state.alpha, beta: state.beta, mu: state.mu.clone(), sigma: state.sigma.clone() }
    }
}

/// Joint parameter draws; column `s` of `theta` pairs with `phi[s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub phi: Vec<f64>,
    pub theta: DMatrix<f64>,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.phi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phi.is_empty()
    }
}

/// Draw `n` parameter sets; draw `s` uses child stream `s` of `rng`.
///
/// Dense Σ̃ is sampled through its Cholesky factor. In factor form
/// `Σ̃ = (I + WWᵀ)⁻¹`, so `θ = μ̃ + Σ̃(z₁ + W z₂)` has covariance Σ̃.
pub fn draw_parameters(post: &ParamPosterior, n: usize, rng: &RngStream) -> Result<PosteriorDraws, PredictError> {
    if n < 2 {
        return Err(PredictError::TooFewDraws { min: 2, got: n });
    }
    let m = post.mu.len();
    let chol = match &post.sigma {
        SigmaRepr::Dense(s) => Some(cholesky_jitter(s.clone())?),
        SigmaRepr::Factor(_) => None,
    };
    let draws = exec::map_indexed(n, |s| -> Result<(f64, DVector<f64>), SampleError> {
        let mut r = rng.derive(s as u64);
        let phi = r.gamma(post.alpha, post.beta)?;
        let z = DVector::from_fn(m, |_, _| r.standard_normal());
        let offset = match (&post.sigma, &chol) {
            (_, Some(l)) => l * z,
            (SigmaRepr::Factor(f), None) => {
                let z2 = DVector::from_fn(f.w.ncols(), |_, _| r.standard_normal());
                post.sigma.mul_vec(&(z + &f.w * z2))
            }
            (SigmaRepr::Dense(_), None) => unreachable!(),
        };
        Ok((phi, &post.mu + offset))
    });
    let mut phi = Vec::with_capacity(n);
    let mut theta = DMatrix::zeros(m, n);
    for (s, d) in draws.into_iter().enumerate() {
        let (p, t) = d?;
        phi.push(p);
        theta.set_column(s, &t);
    }
    Ok(PosteriorDraws { phi, theta })
}

/// Sampled survival curves of one subject on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSurvival {
    pub times: Vec<f64>,
    /// Draws in rows, time nodes in columns.
    pub curves: DMatrix<f64>,
    /// Whether any time lies beyond the training horizon.
    pub extrapolated: bool,
}

impl PosteriorSurvival {
    pub fn n_draws(&self) -> usize {
        self.curves.nrows()
    }

    pub fn mean(&self) -> Vec<f64> {
        self.curves.row_mean().iter().copied().collect()
    }

    pub fn quantile(&self, q: f64) -> Vec<f64> {
        column_quantiles(&self.curves, q)
    }

    pub fn median(&self) -> Vec<f64> {
        self.quantile(0.5)
    }

    pub fn band(&self, level: f64) -> Result<(Vec<f64>, Vec<f64>), PredictError> {
        credible_band(&self.curves, level)
    }
}

/// Linear-interpolation (type 7) quantile of a sorted slice.
fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn column_quantiles(curves: &DMatrix<f64>, q: f64) -> Vec<f64> {
    curves
        .column_iter()
        .map(|c| {
            let mut v: Vec<f64> = c.iter().copied().collect();
            v.sort_by(f64::total_cmp);
            sorted_quantile(&v, q)
        })
        .collect()
}

/// Equal-tailed pointwise band at `level` from draws in rows.
pub fn credible_band(curves: &DMatrix<f64>, level: f64) -> Result<(Vec<f64>, Vec<f64>), PredictError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(PredictError::Level(level));
    }
    if curves.nrows() < MIN_BAND_DRAWS {
        return Err(PredictError::TooFewDraws { min: MIN_BAND_DRAWS, got: curves.nrows() });
    }
    let a = 1.0 - level;
    Ok((column_quantiles(curves, a / 2.0), column_quantiles(curves, 1.0 - a / 2.0)))
}

/// Survival curves of the subject with normalized covariates `x` at the
/// normalized `times`, one row per draw. Times beyond 1 are flagged.
pub fn survival_from_draws(
    model: &MlpModel,
    theta_map: &[f64],
    prior: &BaselinePrior,
    draws: &PosteriorDraws,
    x: &[f64],
    times: &[f64],
) -> Result<PosteriorSurvival, PredictError> {
    if times.iter().any(|t| !t.is_finite() || *t < 0.0) || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(PredictError::Times);
    }
    let extrapolated = times.last().is_some_and(|&t| t > 1.0);
    if extrapolated {
        log::warn!("prediction times extend beyond the training horizon");
    }
    let lead = usize::from(times.first().is_none_or(|&t| t > 0.0));
    let nodes: Vec<f64> = std::iter::repeat_n(0.0, lead).chain(times.iter().copied()).collect();
    let mut inputs = Vec::with_capacity(nodes.len() * (x.len() + 1));
    for &t in &nodes {
        inputs.push(t);
        inputs.extend_from_slice(x);
    }
    let lin = LinearizedModel::linearize(model, theta_map, &inputs)?;
    let d = model.input_dim();
    let base = nodes
        .iter()
        .enumerate()
        .map(|(k, &t)| Ok(prior.time_power(t, 1e-12) / normalizer_z(model, &inputs[k * d..(k + 1) * d])?))
        .collect::<Result<Vec<f64>, NetError>>()?;
    let mut shifted = draws.theta.clone();
    for mut col in shifted.column_iter_mut() {
        col -= lin.theta_map();
    }
    // Row k, column s: g^lin at node k under draw s.
    let mut g = lin.jacobian().tr_mul(&shifted);
    for (k, mut row) in g.row_iter_mut().enumerate() {
        row.add_scalar_mut(lin.g_map()[k]);
    }
    let s_count = draws.len();
    let t_count = times.len();
    let mut curves = DMatrix::zeros(s_count, t_count);
    for s in 0..s_count {
        let phi = draws.phi[s];
        let mut cum = 0.0;
        let mut prev = phi * base[0] * sigmoid(g[(0, s)]);
        for k in 0..nodes.len() {
            let h = phi * base[k] * sigmoid(g[(k, s)]);
            if k > 0 {
                cum += 0.5 * (nodes[k] - nodes[k - 1]) * (h + prev);
            }
            prev = h;
            if k >= lead {
                curves[(s, k - lead)] = (-cum).exp().clamp(0.0, 1.0);
            }
        }
    }
    Ok(PosteriorSurvival { times: times.to_vec(), curves, extrapolated })
}

/// Draws `n_draws` parameter sets and evaluates one subject.
#[allow(clippy::too_many_arguments)]
pub fn sample_survival(
    post: &ParamPosterior,
    model: &MlpModel,
    theta_map: &[f64],
    prior: &BaselinePrior,
    x: &[f64],
    times: &[f64],
    n_draws: usize,
    rng: &RngStream,
) -> Result<PosteriorSurvival, PredictError> {
    let draws = draw_parameters(post, n_draws, rng)?;
    survival_from_draws(model, theta_map, prior, &draws, x, times)
}

/// Per-subject summary rows `subject,time,mean,median,lo,hi`; `time_scale`
/// converts grid times back to original units.
pub fn write_summary_csv(
    mut w: impl Write,
    subjects: &[PosteriorSurvival],
    level: f64,
    time_scale: f64,
) -> Result<(), PredictError> {
    writeln!(w, "subject,time,mean,median,lo,hi")?;
    for (i, s) in subjects.iter().enumerate() {
        let mean = s.mean();
        let median = s.median();
        let (lo, hi) = s.band(level)?;
        for k in 0..s.times.len() {
            writeln!(w, "{i},{},{},{},{},{}", s.times[k] * time_scale, mean[k], median[k], lo[k], hi[k])?;
        }
    }
    Ok(())
}

const DRAWS_MAGIC: &[u8; 8] = b"NSRVDRW1";

/// Compact little-endian dump of every draw: magic, subject, draw and time
/// counts (u64), the times, then each subject's draws row by row.
pub fn write_draws(mut w: impl Write, subjects: &[PosteriorSurvival], time_scale: f64) -> Result<(), PredictError> {
    let (s_count, t_count) = subjects.first().map_or((0, 0), |s| s.curves.shape());
    w.write_all(DRAWS_MAGIC)?;
    for v in [subjects.len(), s_count, t_count] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    if let Some(first) = subjects.first() {
        for t in &first.times {
            w.write_all(&(t * time_scale).to_le_bytes())?;
        }
    }
    for s in subjects {
        for row in s.curves.row_iter() {
            for v in row.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Inverse of [`write_draws`]: times and per-subject draw matrices.
pub fn read_draws(bytes: &[u8]) -> Option<(Vec<f64>, Vec<DMatrix<f64>>)> {
    let mut words = bytes.strip_prefix(DRAWS_MAGIC)?.chunks_exact(8).map(|c| c.try_into().unwrap());
    let mut next_u64 = || words.next().map(u64::from_le_bytes);
    let (n, s, t) = (next_u64()? as usize, next_u64()? as usize, next_u64()? as usize);
    let mut values = Vec::with_capacity(t + n * s * t);
    for _ in 0..t + n * s * t {
        values.push(f64::from_bits(next_u64()?));
    }
    if next_u64().is_some() {
        return None;
    }
    let times = values[..t].to_vec();
    let subjects = (0..n).map(|i| DMatrix::from_row_slice(s, t, &values[t + i * s * t..t + (i + 1) * s * t])).collect();
    Some((times, subjects))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cavi::{LowRankFactor, SigmaStorage};

    fn toy(alpha: f64, beta: f64, sigma: SigmaRepr) -> (MlpModel, Vec<f64>, ParamPosterior) {
        let model = MlpModel::with_hidden(2, &[4]).unwrap();
        let theta = vec![0.0; model.n_params()];
        let post = ParamPosterior { alpha, beta, mu: DVector::from_column_slice(&theta), sigma };
        (model, theta, post)
    }

    fn grid(n: usize) -> Vec<f64> {
        (0..=n).map(|k| k as f64 / n as f64).collect()
    }

    #[test]
    fn point_mass_gives_exponential_survival() {
        let phi0 = 1.7;
        let m = MlpModel::with_hidden(2, &[4]).unwrap().n_params();
        let (model, theta, post) = toy(1e12 * phi0, 1e12, SigmaRepr::Dense(DMatrix::zeros(m, m)));
        let times = grid(50);
        let s = sample_survival(&post, &model, &theta, &BaselinePrior::default(), &[0.3, -0.2], &times, 30, &RngStream::new(1))
            .unwrap();
        for row in s.curves.row_iter() {
            for (k, &t) in times.iter().enumerate() {
                assert!((row[k] - (-phi0 * t).exp()).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn curves_start_at_one_and_decrease() {
        let m = MlpModel::with_hidden(2, &[4]).unwrap().n_params();
        let (model, _, post) = toy(3.0, 2.0, SigmaRepr::Dense(DMatrix::identity(m, m)));
        let theta = model.init_params(&mut RngStream::new(4), 1.0);
        let s = sample_survival(&post, &model, &theta, &BaselinePrior::default(), &[1.0, 0.5], &grid(40), 100, &RngStream::new(2))
            .unwrap();
        for row in s.curves.row_iter() {
            assert_eq!(row[0], 1.0);
            assert!(row.iter().zip(row.iter().skip(1)).all(|(a, b)| b <= a));
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let (lo, hi) = s.band(0.9).unwrap();
        let med = s.median();
        for k in 0..lo.len() {
            assert!(lo[k] <= med[k] && med[k] <= hi[k]);
        }
    }

    #[test]
    fn times_without_zero_integrate_from_origin() {
        let m = MlpModel::with_hidden(2, &[4]).unwrap().n_params();
        let (model, theta, post) = toy(1e12, 1e12, SigmaRepr::Dense(DMatrix::zeros(m, m)));
        let times = [0.5, 1.0, 1.5];
        let s = sample_survival(&post, &model, &theta, &BaselinePrior::default(), &[0.0, 0.0], &times, 5, &RngStream::new(3))
            .unwrap();
        assert!(s.extrapolated);
        assert!((s.curves[(0, 0)] - (-0.5f64).exp()).abs() < 1e-4);
    }

    #[test]
    fn mean_curve_is_stable_in_draw_count() {
        let m = MlpModel::with_hidden(2, &[4]).unwrap().n_params();
        let (model, _, post) = toy(4.0, 4.0, SigmaRepr::Dense(DMatrix::identity(m, m) * 0.2));
        let theta = model.init_params(&mut RngStream::new(9), 1.0);
        let times = grid(10);
        let run = |n, seed| {
            sample_survival(&post, &model, &theta, &BaselinePrior::default(), &[0.4, 0.1], &times, n, &RngStream::new(seed)).unwrap()
        };
        let small = run(400, 10);
        let large = run(4000, 11);
        let (ms, ml) = (small.mean(), large.mean());
        for k in 1..times.len() {
            let col = small.curves.column(k);
            let sd = col.variance().sqrt();
            assert!((ms[k] - ml[k]).abs() <= 3.0 * sd * (1.0 / 400f64 + 1.0 / 4000f64).sqrt() + 1e-12);
        }
    }

    #[test]
    fn factor_sampling_matches_covariance() {
        let mut rng = RngStream::new(5);
        let u = DMatrix::from_fn(6, 3, |_, _| rng.standard_normal());
        let c = [1.0, 0.5, 2.0];
        let f = LowRankFactor { u: &u, c: &c };
        let sigma = f.inverse(SigmaStorage::Factor, 0).unwrap();
        let want = sigma.to_dense();
        let post = ParamPosterior { alpha: 2.0, beta: 1.0, mu: DVector::zeros(6), sigma };
        let n = 40000;
        let d = draw_parameters(&post, n, &RngStream::new(6)).unwrap();
        let emp = &d.theta * d.theta.transpose() / n as f64;
        assert!((emp - &want).amax() < 0.03);
        let phi_mean = d.phi.iter().sum::<f64>() / n as f64;
        assert!((phi_mean - 2.0).abs() < 0.03);
    }

    #[test]
    fn draws_are_reproducible() {
        let m = 5;
        let post = ParamPosterior { alpha: 2.0, beta: 1.0, mu: DVector::zeros(m), sigma: SigmaRepr::Dense(DMatrix::identity(m, m)) };
        let a = draw_parameters(&post, 50, &RngStream::new(8)).unwrap();
        let b = draw_parameters(&post, 50, &RngStream::new(8)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(draw_parameters(&post, 1, &RngStream::new(8)), Err(PredictError::TooFewDraws { .. })));
    }

    #[test]
    fn band_contracts() {
        let curve: Vec<f64> = (0..10).map(|k| 1.0 - k as f64 / 20.0).collect();
        let same = DMatrix::from_fn(30, 10, |_, k| curve[k]);
        let (lo, hi) = credible_band(&same, 0.9).unwrap();
        assert_eq!(lo, curve);
        assert_eq!(hi, curve);
        for level in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(matches!(credible_band(&same, level), Err(PredictError::Level(_))));
        }
        assert!(credible_band(&same.rows(0, 19).into_owned(), 0.9).is_err());
    }

    #[test]
    fn band_covers_generating_curve() {
        let mut rng = RngStream::new(12);
        let t = 50;
        let truth: Vec<f64> = (0..t).map(|k| (-(k as f64) / 25.0).exp()).collect();
        let curves = DMatrix::from_fn(10_000, t, |_, k| truth[k] + 0.05 * rng.standard_normal());
        let (lo, hi) = credible_band(&curves, 0.9).unwrap();
        let covered = (0..t).filter(|&k| lo[k] <= truth[k] && truth[k] <= hi[k]).count();
        assert!(covered as f64 >= 0.88 * t as f64);
    }

    #[test]
    fn draw_file_round_trip() {
        let a = PosteriorSurvival { times: vec![0.0, 0.5], curves: DMatrix::from_row_slice(2, 2, &[1.0, 0.7, 1.0, 0.6]), extrapolated: false };
        let mut buf = Vec::new();
        write_draws(&mut buf, &[a.clone(), a.clone()], 10.0).unwrap();
        let (times, subjects) = read_draws(&buf).unwrap();
        assert_eq!(times, vec![0.0, 5.0]);
        assert_eq!(subjects, vec![a.curves.clone(), a.curves]);
        assert!(read_draws(&buf[..buf.len() - 1]).is_none());
    }
}
