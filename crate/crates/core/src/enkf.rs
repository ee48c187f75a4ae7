//! Stochastic (perturbed-observation) ensemble Kalman filter, and an exact linear
//! Kalman filter used to verify it.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, LorenzParams, StateVec, TimeGrid};
use crate::envda::{
    gaussian_vector, initial_state, AssimilationRun, MemberSnapshot, ObservationOperator,
    PathAccumulator, RunOptions, Twin,
};
use crate::error::{Error, Result};
use crate::rng::{self, tag, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    members: Vec<StateVec>,
}

impl Ensemble {
    pub fn new(members: Vec<StateVec>) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::invalid("ensemble_size", "needs at least 2 members"));
        }
        if let Some(i) = members.iter().position(|m| !m.is_finite()) {
            return Err(Error::invalid("ensemble", format!("member {i} is not finite")));
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[StateVec] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn mean(&self) -> StateVec {
        self.members.iter().fold(StateVec::ZERO, |a, m| a + *m) * (1.0 / self.len() as f64)
    }

    /// Unbiased sample covariance.
    pub fn covariance(&self) -> Matrix3<f64> {
        let m = to_vector(self.mean());
        let mut p = Matrix3::zeros();
        for x in &self.members {
            let d = to_vector(*x) - m;
            p += d * d.transpose();
        }
        p / (self.len() - 1) as f64
    }
}

fn to_vector(s: StateVec) -> nalgebra::Vector3<f64> {
    nalgebra::Vector3::new(s.x, s.y, s.z)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnkfConfig {
    pub ensemble_size: usize,
    /// Observation error std; `R = obs_error_std^2 I`. `None` derives it from the
    /// experiment's noise model.
    pub obs_error_std: Option<f64>,
    /// Model error std; `Q = model_error_std^2 I`.
    pub model_error_std: f64,
    /// Std of the initial member perturbations around the first guess.
    pub initial_spread: f64,
}

impl Default for EnkfConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 50,
            obs_error_std: None,
            model_error_std: 0.0,
            initial_spread: 1.0,
        }
    }
}

impl EnkfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size < 2 {
            return Err(Error::invalid("enkf.ensemble_size", "must be at least 2"));
        }
        if let Some(s) = self.obs_error_std {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::invalid("enkf.obs_error_std", "must be positive"));
            }
        }
        if !(self.model_error_std.is_finite() && self.model_error_std >= 0.0) {
            return Err(Error::invalid("enkf.model_error_std", "must be non-negative"));
        }
        if !(self.initial_spread.is_finite() && self.initial_spread > 0.0) {
            return Err(Error::invalid("enkf.initial_spread", "must be positive"));
        }
        Ok(())
    }
}

/// Maps a member from one observation time to the next.
pub trait Propagator: Sync {
    fn propagate(&self, x: StateVec) -> Result<StateVec>;
}

pub struct LorenzPropagator {
    pub params: LorenzParams,
    pub grid: TimeGrid,
}

impl Propagator for LorenzPropagator {
    fn propagate(&self, x: StateVec) -> Result<StateVec> {
        dynamics::advance(x, &self.params, self.grid.dt, self.grid.steps_per_obs)
    }
}

/// `x -> A x`.
pub struct LinearPropagator(pub Matrix3<f64>);

impl Propagator for LinearPropagator {
    fn propagate(&self, x: StateVec) -> Result<StateVec> {
        let y = self.0 * to_vector(x);
        Ok(StateVec::new(y[0], y[1], y[2]))
    }
}

/// Propagates every member, then adds `N(0, q^2 I)` model noise (skipped when `q = 0`).
pub fn forecast_with(
    ens: &Ensemble,
    model: &dyn Propagator,
    model_error_std: f64,
    rng: &mut Rng,
) -> Result<Ensemble> {
    let mut members = ens
        .members
        .iter()
        .map(|m| model.propagate(*m))
        .collect::<Result<Vec<_>>>()?;
    if model_error_std > 0.0 {
        for m in members.iter_mut() {
            *m += gaussian_vector(rng, model_error_std);
        }
    }
    Ensemble::new(members)
}

pub fn enkf_forecast(
    ens: &Ensemble,
    params: &LorenzParams,
    grid: &TimeGrid,
    cfg: &EnkfConfig,
    rng: &mut Rng,
) -> Result<Ensemble> {
    let model = LorenzPropagator {
        params: *params,
        grid: *grid,
    };
    forecast_with(ens, &model, cfg.model_error_std, rng)
}

/// `K = P H^T (H P H^T + R)^-1` via a Cholesky solve; `r_diag` holds `R`'s diagonal.
pub fn kalman_gain(ens: &Ensemble, op: &ObservationOperator, r_diag: &[f64]) -> Result<DMatrix<f64>> {
    let p = DMatrix::from_column_slice(3, 3, ens.covariance().as_slice());
    gain_from_covariance(&p, &op.matrix(), r_diag)
}

fn gain_from_covariance(p: &DMatrix<f64>, h: &DMatrix<f64>, r_diag: &[f64]) -> Result<DMatrix<f64>> {
    if r_diag.len() != h.nrows() {
        return Err(Error::dims("R diagonal", h.nrows(), r_diag.len()));
    }
    let hp = h * p;
    let s = &hp * h.transpose() + DMatrix::from_diagonal(&DVector::from_column_slice(r_diag));
    let chol = s
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("innovation covariance H P H^T + R"))?;
    // S symmetric: K^T = S^-1 H P
    Ok(chol.solve(&hp).transpose())
}

/// Per-member perturbations `mu_i ~ N(0, R)`, drawn member by member.
pub fn draw_perturbations(n: usize, r_diag: &[f64], rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            r_diag
                .iter()
                .map(|r| r.sqrt() * Distribution::<f64>::sample(&StandardNormal, rng))
                .collect()
        })
        .collect()
}

pub fn enkf_analysis(
    ens: &Ensemble,
    observation: &[f64],
    op: &ObservationOperator,
    r_diag: &[f64],
    rng: &mut Rng,
) -> Result<Ensemble> {
    let mu = draw_perturbations(ens.len(), r_diag, rng);
    analysis_with_perturbations(ens, observation, op, r_diag, &mu)
}

/// `x_a_i = x_f_i + K (y + mu_i - H x_f_i)` with caller-supplied perturbations.
pub fn analysis_with_perturbations(
    ens: &Ensemble,
    observation: &[f64],
    op: &ObservationOperator,
    r_diag: &[f64],
    perturbations: &[Vec<f64>],
) -> Result<Ensemble> {
    if observation.len() != op.dim() {
        return Err(Error::dims("enkf observation", op.dim(), observation.len()));
    }
    if perturbations.len() != ens.len() {
        return Err(Error::dims("enkf perturbations", ens.len(), perturbations.len()));
    }
    let k = kalman_gain(ens, op, r_diag)?;
    let members = ens
        .members
        .iter()
        .zip(perturbations)
        .map(|(x, mu)| {
            let hx = op.project(x);
            let d = DVector::from_iterator(
                op.dim(),
                observation.iter().zip(mu).zip(&hx).map(|((y, m), h)| y + m - h),
            );
            let dx = &k * d;
            *x + StateVec::new(dx[0], dx[1], dx[2])
        })
        .collect();
    Ensemble::new(members)
}

/// Textbook Kalman predict (`A m`, `A P A^T + Q`) followed, when an observation is
/// given, by the update in Joseph form.
pub fn kf_exact(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    model: &DMatrix<f64>,
    h: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    observation: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = mean.len();
    if cov.shape() != (n, n) || model.shape() != (n, n) || q.shape() != (n, n) {
        return Err(Error::dims("kf_exact state matrices", n, cov.nrows()));
    }
    if h.ncols() != n || r.shape() != (h.nrows(), h.nrows()) {
        return Err(Error::dims("kf_exact observation matrices", h.nrows(), r.nrows()));
    }
    check_psd(cov, "prior covariance")?;
    check_psd(q, "model error covariance")?;
    let m = model * mean;
    let p = model * cov * model.transpose() + q;
    let Some(y) = observation else {
        return Ok((m, p));
    };
    if y.len() != h.nrows() {
        return Err(Error::dims("kf_exact observation", h.nrows(), y.len()));
    }
    let hp = h * &p;
    let s = &hp * h.transpose() + r;
    let chol = s
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("innovation covariance H P H^T + R"))?;
    let k = chol.solve(&hp).transpose();
    let m_a = &m + &k * (y - h * &m);
    let i_kh = DMatrix::identity(n, n) - &k * h;
    let p_a = &i_kh * &p * i_kh.transpose() + &k * r * k.transpose();
    Ok((m_a, p_a))
}

fn check_psd(m: &DMatrix<f64>, what: &'static str) -> Result<()> {
    let asym = (m - m.transpose()).abs().max();
    let scale = m.abs().max().max(1.0);
    if asym > 1e-10 * scale {
        return Err(Error::NotPositiveDefinite(what));
    }
    let eig = SymmetricEigen::new(m.clone());
    if eig.eigenvalues.iter().any(|&l| l < -1e-12 * scale) {
        return Err(Error::NotPositiveDefinite(what));
    }
    Ok(())
}

/// A fixed 3D linear-Gaussian system for checking the EnKF against [`kf_exact`]:
/// prior `N(m0, P0)`, one predict with `A` and `Q = q I`, one full observation with
/// `R = r I`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianCase {
    pub a: Matrix3<f64>,
    pub m0: DVector<f64>,
    pub p0: DMatrix<f64>,
    pub q: f64,
    pub r: f64,
    pub y: [f64; 3],
}

impl Default for LinearGaussianCase {
    fn default() -> Self {
        Self {
            // damped cyclic advection
            a: Matrix3::new(0.9, 0.1, 0.0, 0.0, 0.9, 0.1, 0.1, 0.0, 0.9),
            m0: DVector::from_vec(vec![1.0, 2.0, 3.0]),
            p0: DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.0, 0.3, 1.0, 0.2, 0.0, 0.2, 1.0]),
            q: 0.1,
            r: 0.5,
            y: [1.5, 1.0, 2.0],
        }
    }
}

impl LinearGaussianCase {
    pub fn exact(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let i3 = DMatrix::identity(3, 3);
        kf_exact(
            &self.m0,
            &self.p0,
            &DMatrix::from_column_slice(3, 3, self.a.as_slice()),
            &i3,
            &(&i3 * self.q),
            &(&i3 * self.r),
            Some(&DVector::from_column_slice(&self.y)),
        )
    }

    /// Analysis mean and covariance of one EnKF cycle with `n` members.
    pub fn enkf_cycle(&self, n: usize, seed: u64) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let l = self
            .p0
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite("prior covariance"))?
            .l();
        let mut g = rng::stream(seed, &[tag::ENKF]);
        let members = (0..n)
            .map(|_| {
                let xi = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut g));
                let x = &self.m0 + &l * xi;
                StateVec::new(x[0], x[1], x[2])
            })
            .collect();
        let f = forecast_with(&Ensemble::new(members)?, &LinearPropagator(self.a), self.q.sqrt(), &mut g)?;
        let an = enkf_analysis(&f, &self.y, &ObservationOperator::full(), &[self.r; 3], &mut g)?;
        let m = an.mean();
        Ok((
            DVector::from_vec(vec![m.x, m.y, m.z]),
            DMatrix::from_column_slice(3, 3, an.covariance().as_slice()),
        ))
    }
}

/// Relative Frobenius error `|a - b| / |b|` over matching element slices.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let norm: f64 = b.iter().map(|y| y * y).sum();
    (diff / norm).sqrt()
}

/// Static description of an EnKF twin run.
#[derive(Debug, Clone, PartialEq)]
pub struct EnkfSetup {
    pub params: LorenzParams,
    pub grid: TimeGrid,
    pub op: ObservationOperator,
    pub cfg: EnkfConfig,
    /// Observation-error std used to build `R` (resolved from the config or noise model).
    pub obs_error_std: f64,
}

/// Assimilates a twin's observations; the reported path is the ensemble mean at
/// every model step, with the analysis mean at observation times.
pub fn run_enkf(setup: &EnkfSetup, twin: &Twin, seed: u64, opts: &RunOptions) -> Result<AssimilationRun> {
    setup.cfg.validate()?;
    let t_obs = setup.grid.steps_per_obs;
    if twin.steps_per_obs != t_obs {
        return Err(Error::dims("twin steps_per_obs", t_obs, twin.steps_per_obs));
    }
    let n = setup.cfg.ensemble_size;
    let r_diag = vec![setup.obs_error_std.powi(2); setup.op.dim()];
    let mut rng = rng::stream(seed, &[tag::ENKF]);
    let x0 = initial_state(&twin.observations[0], &setup.op, &setup.params);
    let mut ens = Ensemble::new(
        (0..n)
            .map(|_| x0 + gaussian_vector(&mut rng, setup.cfg.initial_spread))
            .collect(),
    )?;
    let mut acc = PathAccumulator::new(&twin.reference, n, opts.keep_member_paths);
    for (i, m) in ens.members.iter().enumerate() {
        acc.record(i, 0, *m);
    }
    let mut snapshot = None;
    let mut windows: Vec<Vec<(StateVec, StateVec)>> = Vec::with_capacity(n);
    for k in 1..=twin.n_intervals() {
        windows.clear();
        for m in &ens.members {
            windows.push(dynamics::integrate(*m, &setup.params, &setup.grid, t_obs)?);
        }
        let start = (k - 1) * t_obs;
        for j in 1..t_obs {
            for (i, w) in windows.iter().enumerate() {
                acc.record(i, start + j, w[j].0);
            }
        }
        let mut forecast: Vec<StateVec> = windows.iter().map(|w| w[t_obs].0).collect();
        if setup.cfg.model_error_std > 0.0 {
            for m in forecast.iter_mut() {
                *m += gaussian_vector(&mut rng, setup.cfg.model_error_std);
            }
        }
        let fc = Ensemble::new(forecast)?;
        ens = enkf_analysis(&fc, &twin.observations[k], &setup.op, &r_diag, &mut rng)?;
        for (i, m) in ens.members.iter().enumerate() {
            acc.record(i, k * t_obs, *m);
        }
        if opts.snapshot_at == Some(k) {
            snapshot = Some(MemberSnapshot {
                obs_index: k,
                forecast: fc.members,
                analysis: ens.members.clone(),
            });
        }
    }
    Ok(acc.finish(snapshot))
}
