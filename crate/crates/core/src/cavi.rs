//! Coordinate-ascent variational inference in the linearized, augmented model.
//!
//! The factors are `q(φ) = Gamma(α̃, β̃)`, `q(θ) = N(μ̃, Σ̃)`, PG(1, c̃_i) for
//! the event marks and a marked Poisson process with intensity `λ^Q` for the
//! latent points. One sweep updates them in the order ω, Ψ, φ, θ.
//!
//! The θ-update needs `Σ̃ = (I + U C Uᵀ)⁻¹` where `U` stacks the Jacobians at
//! the quadrature points and `C` is diagonal. With `W = U C^{1/2}` (zero-weight
//! columns dropped) and `R` columns, the inverse is formed either densely or,
//! when `R < m`, through `Σ̃ = I − W (I_R + WᵀW)⁻¹ Wᵀ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::HazardContext;
use crate::net::LinearizedModel;
use crate::numkit::{digamma, pg_mean, DomainError};

#[derive(Debug, Error)]
pub enum CaviError {
    #[error("linear system is not positive definite even with jitter {0:e}")]
    Indefinite(f64),
    #[error("non-finite {block} at iteration {iteration}")]
    NonFinite { iteration: usize, block: &'static str, last: Box<VariationalState> },
    #[error("{what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// How Σ̃ is stored after each θ-update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaStorage {
    /// Dense up to `dense_limit` parameters, factor form above.
    Auto,
    Dense,
    Factor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaviConfig {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub storage: SigmaStorage,
    pub dense_limit: usize,
    /// Upper clamp on the exponent of the latent intensity.
    pub exp_clamp: f64,
    /// Initial covariance is this multiple of the identity.
    pub init_sigma_scale: f64,
}

impl Default for CaviConfig {
    fn default() -> Self {
        Self { max_iter: 1000, rel_tol: 1e-6, storage: SigmaStorage::Auto, dense_limit: 5000, exp_clamp: 700.0, init_sigma_scale: 1.0 }
    }
}

/// Lower Cholesky factor of `I_R + WᵀW` together with `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorForm {
    pub w: DMatrix<f64>,
    pub chol: DMatrix<f64>,
}

/// Σ̃ either as a dense matrix or as `I − W S⁻¹ Wᵀ` with `S = I + WᵀW`.
#[derive(Debug, Clone, PartialEq)]
pub enum SigmaRepr {
    Dense(DMatrix<f64>),
    Factor(FactorForm),
}

const JITTERS: [f64; 8] = [0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Cholesky with escalating diagonal jitter; returns the lower factor.
pub(crate) fn cholesky_jitter(mut a: DMatrix<f64>) -> Result<DMatrix<f64>, CaviError> {
    let n = a.nrows();
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
    let mut added = 0.0;
    for &j in &JITTERS {
        let bump = j * scale - added;
        if bump > 0.0 {
            for i in 0..n {
                a[(i, i)] += bump;
            }
            added += bump;
        }
        if let Some(c) = a.clone().cholesky() {
            if j > 0.0 {
                log::warn!("Cholesky needed jitter {j:e}");
            }
            return Ok(c.unpack());
        }
    }
    Err(CaviError::Indefinite(JITTERS[JITTERS.len() - 1]))
}

fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b).expect("Cholesky factor has a positive diagonal")
}

impl SigmaRepr {
    pub fn identity(m: usize, storage: SigmaStorage, dense_limit: usize) -> Self {
        Self::scaled_identity(m, 1.0, storage, dense_limit)
    }

    /// `scale · I`. The factor form can only hold the identity, so there the
    /// scale is ignored with a warning.
    pub fn scaled_identity(m: usize, scale: f64, storage: SigmaStorage, dense_limit: usize) -> Self {
        if use_dense(storage, m, dense_limit) {
            SigmaRepr::Dense(DMatrix::identity(m, m) * scale)
        } else {
            if scale != 1.0 {
                log::warn!("factor storage starts from the identity covariance; scale {scale} ignored");
            }
            SigmaRepr::Factor(FactorForm { w: DMatrix::zeros(m, 0), chol: DMatrix::zeros(0, 0) })
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            SigmaRepr::Dense(s) => s.nrows(),
            SigmaRepr::Factor(f) => f.w.nrows(),
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, SigmaRepr::Dense(_))
    }

    /// `L⁻¹ Wᵀ X` for the factor form.
    fn whiten(f: &FactorForm, x: &DMatrix<f64>) -> DMatrix<f64> {
        solve_lower(&f.chol, &f.w.tr_mul(x))
    }

    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            SigmaRepr::Dense(s) => s * v,
            SigmaRepr::Factor(f) => {
                if f.w.ncols() == 0 {
                    return v.clone();
                }
                let t = f.w.tr_mul(v);
                let y = f.chol.solve_lower_triangular(&t).unwrap();
                let z = f.chol.tr_solve_lower_triangular(&y).unwrap();
                v - &f.w * z
            }
        }
    }

    pub fn diagonal(&self) -> DVector<f64> {
        match self {
            SigmaRepr::Dense(s) => s.diagonal(),
            SigmaRepr::Factor(f) => {
                let m = f.w.nrows();
                if f.w.ncols() == 0 {
                    return DVector::from_element(m, 1.0);
                }
                let v = solve_lower(&f.chol, &f.w.transpose());
                DVector::from_iterator(m, v.column_iter().map(|c| 1.0 - c.norm_squared()))
            }
        }
    }

    /// `J_pᵀ Σ̃ J_p` for every column of `jac`.
    pub fn quad_forms(&self, jac: &DMatrix<f64>) -> Vec<f64> {
        match self {
            SigmaRepr::Dense(s) => {
                let y = s * jac;
                jac.column_iter().zip(y.column_iter()).map(|(a, b)| a.dot(&b)).collect()
            }
            SigmaRepr::Factor(f) => {
                let base: Vec<f64> = jac.column_iter().map(|c| c.norm_squared()).collect();
                if f.w.ncols() == 0 {
                    return base;
                }
                let v = Self::whiten(f, jac);
                base.iter().zip(v.column_iter()).map(|(b, c)| b - c.norm_squared()).collect()
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            SigmaRepr::Dense(s) => s.clone(),
            SigmaRepr::Factor(f) => {
                let m = f.w.nrows();
                let mut out = DMatrix::identity(m, m);
                if f.w.ncols() > 0 {
                    let v = solve_lower(&f.chol, &f.w.transpose());
                    out.gemm_tr(-1.0, &v, &v, 1.0);
                }
                out
            }
        }
    }

    /// Storable form; the factor form keeps only `W`.
    pub fn to_data(&self) -> SigmaData {
        match self {
            SigmaRepr::Dense(s) => SigmaData::Dense { m: s.nrows(), values: s.as_slice().to_vec() },
            SigmaRepr::Factor(f) => SigmaData::Factor { m: f.w.nrows(), r: f.w.ncols(), w: f.w.as_slice().to_vec() },
        }
    }

    pub fn from_data(data: &SigmaData) -> Result<Self, CaviError> {
        match data {
            SigmaData::Dense { m, values } => {
                if values.len() != m * m {
                    return Err(CaviError::Dimension { what: "dense covariance entries", expected: m * m, got: values.len() });
                }
                Ok(SigmaRepr::Dense(DMatrix::from_column_slice(*m, *m, values)))
            }
            SigmaData::Factor { m, r, w } => {
                if w.len() != m * r {
                    return Err(CaviError::Dimension { what: "factor entries", expected: m * r, got: w.len() });
                }
                let w = DMatrix::from_column_slice(*m, *r, w);
                Ok(SigmaRepr::Factor(factor_from_w(w)?))
            }
        }
    }
}

/// Column-major storage of [`SigmaRepr`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaData {
    Dense { m: usize, values: Vec<f64> },
    Factor { m: usize, r: usize, w: Vec<f64> },
}

fn use_dense(storage: SigmaStorage, m: usize, dense_limit: usize) -> bool {
    match storage {
        SigmaStorage::Auto => m <= dense_limit,
        SigmaStorage::Dense => true,
        SigmaStorage::Factor => false,
    }
}

const ROW_BLOCK: usize = 2048;

fn gram_block(s: &mut DMatrix<f64>, w: &DMatrix<f64>, start: usize) {
    let block = w.rows(start, ROW_BLOCK.min(w.nrows() - start));
    s.gemm(1.0, &block.transpose(), &block, 1.0);
}

fn factor_from_w(w: DMatrix<f64>) -> Result<FactorForm, CaviError> {
    let mut s = DMatrix::identity(w.ncols(), w.ncols());
    for start in (0..w.nrows()).step_by(ROW_BLOCK) {
        gram_block(&mut s, &w, start);
    }
    let chol = cholesky_jitter(s)?;
    Ok(FactorForm { w, chol })
}

/// Jacobian columns `U` and diagonal weights `C` of `I + U C Uᵀ`.
#[derive(Debug, Clone)]
pub struct LowRankFactor<'a> {
    pub u: &'a DMatrix<f64>,
    pub c: &'a [f64],
}

impl LowRankFactor<'_> {
    /// `B = ½ (I + U C Uᵀ)`, densely.
    pub fn b_matrix(&self) -> DMatrix<f64> {
        let m = self.u.nrows();
        let w = self.scaled_columns();
        let mut b = DMatrix::identity(m, m);
        b.gemm(1.0, &w, &w.transpose(), 1.0);
        b * 0.5
    }

    fn kept(&self) -> Vec<usize> {
        (0..self.c.len()).filter(|&p| self.c[p] > 0.0).collect()
    }

    /// `W = U C^{1/2}` restricted to columns with positive weight.
    pub fn scaled_columns(&self) -> DMatrix<f64> {
        let keep = self.kept();
        let mut w = DMatrix::zeros(self.u.nrows(), keep.len());
        for (k, &p) in keep.iter().enumerate() {
            w.set_column(k, &(self.u.column(p) * self.c[p].sqrt()));
        }
        w
    }

    /// Factor form built one row block at a time, so each block of `W` is
    /// still in cache when its Gram contribution is added.
    fn factor_form(&self, buffer: Option<DMatrix<f64>>) -> Result<FactorForm, CaviError> {
        let keep = self.kept();
        let m = self.u.nrows();
        let roots: Vec<f64> = keep.iter().map(|&p| self.c[p].sqrt()).collect();
        let mut w = match buffer {
            Some(b) if b.shape() == (m, keep.len()) => b,
            _ => DMatrix::zeros(m, keep.len()),
        };
        let mut s = DMatrix::identity(keep.len(), keep.len());
        for start in (0..m).step_by(ROW_BLOCK) {
            let len = ROW_BLOCK.min(m - start);
            for (k, &p) in keep.iter().enumerate() {
                let src = self.u.view((start, p), (len, 1));
                w.view_mut((start, k), (len, 1)).zip_apply(&src, |dst, v| *dst = v * roots[k]);
            }
            gram_block(&mut s, &w, start);
        }
        let chol = cholesky_jitter(s)?;
        Ok(FactorForm { w, chol })
    }

    /// `(I + U C Uᵀ)⁻¹` by Woodbury when the kept rank is below `m`, else by
    /// a dense Cholesky; stored per `storage`.
    pub fn inverse(&self, storage: SigmaStorage, dense_limit: usize) -> Result<SigmaRepr, CaviError> {
        self.inverse_reusing(storage, dense_limit, None)
    }

    /// As [`inverse`](Self::inverse), overwriting the storage of `previous`
    /// when it is a factor form of the same shape.
    pub fn inverse_reusing(
        &self,
        storage: SigmaStorage,
        dense_limit: usize,
        previous: Option<SigmaRepr>,
    ) -> Result<SigmaRepr, CaviError> {
        let m = self.u.nrows();
        let dense = use_dense(storage, m, dense_limit);
        if self.kept().len() < m || !dense {
            let buffer = match previous {
                Some(SigmaRepr::Factor(f)) if !dense => Some(f.w),
                _ => None,
            };
            let f = self.factor_form(buffer)?;
            Ok(if dense { SigmaRepr::Dense(SigmaRepr::Factor(f).to_dense()) } else { SigmaRepr::Factor(f) })
        } else {
            let w = self.scaled_columns();
            let mut mm = DMatrix::identity(m, m);
            mm.gemm(1.0, &w, &w.transpose(), 1.0);
            let l = cholesky_jitter(mm)?;
            let linv = solve_lower(&l, &DMatrix::identity(m, m));
            let mut inv = DMatrix::zeros(m, m);
            inv.gemm_tr(1.0, &linv, &linv, 0.0);
            Ok(SigmaRepr::Dense(inv))
        }
    }

    /// Dense reference inverse of `I + U C Uᵀ` for tests.
    pub fn dense_inverse(&self) -> DMatrix<f64> {
        (self.b_matrix() * 2.0).try_inverse().expect("I + UCUᵀ is invertible")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub alpha: f64,
    pub beta: f64,
    pub e_log_phi: f64,
    pub mu: DVector<f64>,
    pub sigma: SigmaRepr,
    /// `c̃_i`, zero for censored observations.
    pub c: Vec<f64>,
    /// `E[ω_i]`.
    pub omega: Vec<f64>,
    /// `λ^Q` at every quadrature point.
    pub lambda: Vec<f64>,
    /// `m̃` at every quadrature point.
    pub m: Vec<f64>,
    /// `s̃` at every quadrature point.
    pub s: Vec<f64>,
    pub iteration: usize,
    pub converged: bool,
}

impl VariationalState {
    pub fn phi_mean(&self) -> f64 {
        self.alpha / self.beta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaviTraceEntry {
    pub iteration: usize,
    pub alpha: f64,
    pub beta: f64,
    pub mu_norm: f64,
    /// Relative changes of (α̃, μ̃, diag Σ̃, c̃).
    pub changes: [f64; 4],
    pub clamped: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CaviTrace {
    pub entries: Vec<CaviTraceEntry>,
}

/// The fixed inputs of CAVI.
#[derive(Debug, Clone, Copy)]
pub struct CaviProblem<'a> {
    pub lin: &'a LinearizedModel,
    pub ctx: &'a HazardContext,
    pub events: &'a [bool],
}

/// `ln(2 cosh(x/2))` without overflow.
fn log_two_cosh_half(x: f64) -> f64 {
    let h = 0.5 * x.abs();
    h + (-2.0 * h).exp().ln_1p()
}

fn rel_change(new: &[f64], old: &[f64]) -> f64 {
    let num: f64 = new.iter().zip(old).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let den: f64 = old.iter().map(|v| v * v).sum::<f64>().sqrt();
    if num == 0.0 {
        0.0
    } else {
        num / den.max(f64::MIN_POSITIVE)
    }
}

impl<'a> CaviProblem<'a> {
    pub fn new(lin: &'a LinearizedModel, ctx: &'a HazardContext, events: &'a [bool]) -> Result<Self, CaviError> {
        if lin.n_points() != ctx.points().len() {
            return Err(CaviError::Dimension { what: "linearization points", expected: ctx.points().len(), got: lin.n_points() });
        }
        if events.len() != ctx.n_observations() {
            return Err(CaviError::Dimension { what: "event flags", expected: ctx.n_observations(), got: events.len() });
        }
        Ok(Self { lin, ctx, events })
    }

    /// `β̃ = β0 + Σ_i ∫ t^{ρ−1}/Z`, fixed by the data.
    pub fn beta_tilde(&self) -> f64 {
        self.ctx.prior().beta0 + self.ctx.total_base_integral()
    }

    /// Starting state `α̃ = φ_MAP β̃`, `μ̃ = θ_MAP`, `Σ̃ = s·I` with `s` from the
    /// config (1 by default).
    pub fn init(&self, phi_map: f64, config: &CaviConfig) -> Result<VariationalState, CaviError> {
        let beta = self.beta_tilde();
        let alpha = phi_map * beta;
        let m = self.lin.n_params();
        let n = self.ctx.n_observations();
        let p = self.ctx.points().len();
        let mut st = VariationalState {
            alpha,
            beta,
            e_log_phi: digamma(alpha)? - beta.ln(),
            mu: self.lin.theta_map().clone(),
            sigma: SigmaRepr::scaled_identity(m, config.init_sigma_scale, config.storage, config.dense_limit),
            c: vec![0.0; n],
            omega: vec![0.25; n],
            lambda: vec![0.0; p],
            m: vec![0.0; p],
            s: vec![0.0; p],
            iteration: 0,
            converged: false,
        };
        self.update_moments(&mut st);
        Ok(st)
    }

    /// `m̃ = g_MAP + Jᵀ(μ̃ − θ_MAP)`, `s̃ = √(m̃² + JᵀΣ̃J)`.
    pub fn update_moments(&self, st: &mut VariationalState) {
        let mean = self.lin.eval(&st.mu);
        let quad = st.sigma.quad_forms(self.lin.jacobian());
        for p in 0..mean.len() {
            st.m[p] = mean[p];
            st.s[p] = (mean[p] * mean[p] + quad[p].max(0.0)).sqrt();
        }
    }

    pub fn update_omega(&self, st: &mut VariationalState) {
        let pts = self.ctx.points();
        for i in 0..st.c.len() {
            st.c[i] = if self.events[i] { st.s[pts.end_index(i)] } else { 0.0 };
            st.omega[i] = pg_mean(1.0, st.c[i]);
        }
    }

    /// Returns the number of clamped exponents.
    pub fn update_psi(&self, st: &mut VariationalState, clamp: f64) -> usize {
        let base = self.ctx.base();
        let mut clamped = 0;
        for p in 0..st.lambda.len() {
            let mut e = -0.5 * st.m[p] + st.e_log_phi - log_two_cosh_half(st.s[p]);
            if e > clamp {
                e = clamp;
                clamped += 1;
            }
            st.lambda[p] = base[p] * e.exp();
        }
        if clamped > 0 {
            log::warn!("latent intensity exponent clamped at {clamp} on {clamped} points");
        }
        clamped
    }

    pub fn update_phi(&self, st: &mut VariationalState) -> Result<(), CaviError> {
        let pts = self.ctx.points();
        let prior = self.ctx.prior();
        let mut alpha = prior.alpha0;
        for i in 0..pts.n_observations() {
            let mass: f64 = pts.range(i).map(|p| pts.weights[p] * st.lambda[p]).sum();
            alpha += f64::from(u8::from(self.events[i])) + mass;
        }
        st.alpha = alpha;
        st.e_log_phi = digamma(alpha)? - st.beta.ln();
        Ok(())
    }

    /// Diagonal weights `C` and right-hand side `A` of the θ-update.
    pub fn theta_system(&self, st: &VariationalState) -> (Vec<f64>, DVector<f64>) {
        let pts = self.ctx.points();
        let g = self.lin.g_map();
        let jac = self.lin.jacobian();
        let theta_map = self.lin.theta_map();
        let offset = jac.tr_mul(theta_map);
        let p_total = pts.len();
        let mut c = vec![0.0; p_total];
        let mut a = DVector::zeros(p_total);
        for i in 0..pts.n_observations() {
            let end = pts.end_index(i);
            for p in pts.range(i) {
                let c0 = g[p] - offset[p];
                let wl = pts.weights[p] * st.lambda[p];
                let kappa = pg_mean(1.0, st.s[p]);
                c[p] = wl * kappa;
                a[p] = -wl * (1.0 + 2.0 * kappa * c0);
                if p == end && self.events[i] {
                    c[p] += st.omega[i];
                    a[p] += 1.0 - 2.0 * st.omega[i] * c0;
                }
            }
        }
        let rhs = (jac * a) * 0.5;
        (c, rhs)
    }

    pub fn update_theta(&self, st: &mut VariationalState, config: &CaviConfig) -> Result<(), CaviError> {
        let (c, rhs) = self.theta_system(st);
        let factor = LowRankFactor { u: self.lin.jacobian(), c: &c };
        let previous = std::mem::replace(&mut st.sigma, SigmaRepr::Dense(DMatrix::zeros(0, 0)));
        st.sigma = factor.inverse_reusing(config.storage, config.dense_limit, Some(previous))?;
        st.mu = st.sigma.mul_vec(&rhs);
        self.update_moments(st);
        Ok(())
    }

    /// One full ω → Ψ → φ → θ sweep; returns the relative block changes and
    /// the number of clamped exponents.
    pub fn sweep(&self, st: &mut VariationalState, config: &CaviConfig) -> Result<([f64; 4], usize), CaviError> {
        let old_alpha = st.alpha;
        let old_mu = st.mu.clone();
        let old_diag = st.sigma.diagonal();
        let old_c = st.c.clone();
        self.update_omega(st);
        let clamped = self.update_psi(st, config.exp_clamp);
        self.update_phi(st)?;
        self.update_theta(st, config)?;
        let changes = [
            rel_change(&[st.alpha], &[old_alpha]),
            rel_change(st.mu.as_slice(), old_mu.as_slice()),
            rel_change(st.sigma.diagonal().as_slice(), old_diag.as_slice()),
            rel_change(&st.c, &old_c),
        ];
        st.iteration += 1;
        Ok((changes, clamped))
    }

    fn check_finite(st: &VariationalState) -> Option<&'static str> {
        if !st.alpha.is_finite() || !st.e_log_phi.is_finite() {
            return Some("phi factor");
        }
        if st.mu.iter().any(|v| !v.is_finite()) {
            return Some("mean");
        }
        if st.lambda.iter().any(|v| !v.is_finite()) {
            return Some("latent intensity");
        }
        if st.s.iter().chain(&st.m).any(|v| !v.is_finite()) {
            return Some("moments");
        }
        None
    }
}

/// Runs CAVI from the MAP state until every block changes by less than
/// `rel_tol` (relative) in one sweep.
pub fn run_cavi(problem: &CaviProblem<'_>, phi_map: f64, config: &CaviConfig) -> Result<(VariationalState, CaviTrace), CaviError> {
    let mut st = problem.init(phi_map, config)?;
    let mut trace = CaviTrace::default();
    while st.iteration < config.max_iter {
        let last = st.clone();
        let (changes, clamped) = problem.sweep(&mut st, config)?;
        if let Some(block) = CaviProblem::check_finite(&st) {
            return Err(CaviError::NonFinite { iteration: st.iteration, block, last: Box::new(last) });
        }
        trace.entries.push(CaviTraceEntry {
            iteration: st.iteration,
            alpha: st.alpha,
            beta: st.beta,
            mu_norm: st.mu.norm(),
            changes,
            clamped,
        });
        let worst = changes.iter().copied().fold(0.0, f64::max);
        log::debug!("cavi iteration {}: alpha {:.6}, max change {worst:.3e}", st.iteration, st.alpha);
        if worst < config.rel_tol {
            st.converged = true;
            break;
        }
    }
    if !st.converged {
        log::warn!("CAVI stopped after {} iterations without meeting the tolerance", st.iteration);
    }
    Ok((st, trace))
}
