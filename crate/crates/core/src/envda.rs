//! The data-assimilation environment.
//!
//! A twin experiment integrates a reference ("truth") trajectory and emits noisy
//! observations every `steps_per_obs` model steps. The agent sees the forecast and
//! its derivatives over the last observation window plus the innovation, and
//! corrects the forecast endpoint additively: `x_a = x_f + action`.

use rand::Rng as _;
use rand_distr::{Distribution, LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{self, climatological_mean, LorenzParams, StateVec, TimeGrid};
use crate::error::{Error, Result};
use crate::ppo::{sample_gaussian, Action, ActionModel, Environment, Step, ACTION_DIM, LOG_STD_MIN};
use crate::rng::{self, tag, Rng};

/// Reward assigned to the step on which the forecast blows up.
pub const DIVERGENCE_REWARD: f64 = -100.0;
/// Model time discarded before the experiment window.
pub const SPIN_UP_TIME: f64 = 10.0;
pub const REFERENCE_START: StateVec = StateVec::new(1.0, 1.0, 1.0);

/// Diagonal selection of observed state components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ObservationOperator {
    mask: [bool; 3],
}

impl ObservationOperator {
    pub fn new(mask: [bool; 3]) -> Result<Self> {
        if !mask.iter().any(|&m| m) {
            return Err(Error::invalid("mask", "at least one component must be observed"));
        }
        Ok(Self { mask })
    }

    pub fn full() -> Self {
        Self { mask: [true; 3] }
    }

    /// Parses a mask like `"101"`.
    pub fn parse(s: &str) -> Result<Self> {
        let bits: Vec<bool> = s
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(Error::invalid("mask", format!("expected 0/1 digits, got {s:?}"))),
            })
            .collect::<Result<_>>()?;
        let mask: [bool; 3] = bits
            .try_into()
            .map_err(|_| Error::invalid("mask", format!("expected 3 digits, got {s:?}")))?;
        Self::new(mask)
    }

    pub fn mask(&self) -> [bool; 3] {
        self.mask
    }

    pub fn label(&self) -> String {
        self.mask.iter().map(|&m| if m { '1' } else { '0' }).collect()
    }

    pub fn dim(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..3).filter(|&i| self.mask[i])
    }

    pub fn project(&self, s: &StateVec) -> Vec<f64> {
        self.indices().map(|i| s[i]).collect()
    }

    /// Places observed values into a state, taking the rest from `fill`.
    pub fn lift(&self, obs: &[f64], fill: StateVec) -> StateVec {
        let mut a = fill.to_array();
        for (i, v) in self.indices().zip(obs) {
            a[i] = *v;
        }
        StateVec::from_array(a)
    }

    /// Selection matrix `H` (rows = observed components).
    pub fn matrix(&self) -> nalgebra::DMatrix<f64> {
        let mut h = nalgebra::DMatrix::zeros(self.dim(), 3);
        for (r, c) in self.indices().enumerate() {
            h[(r, c)] = 1.0;
        }
        h
    }
}

/// Additive observation noise, drawn independently per component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum NoiseModel {
    None,
    Gaussian { std: f64 },
    /// Standard log-normal: `exp(N(0, 1))`.
    LogNormal,
    /// Standard uniform on `[0, 1)`.
    Uniform,
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            NoiseModel::Gaussian { std } if !(std.is_finite() && std > 0.0) => Err(
                Error::invalid("noise.std", format!("must be positive, got {std}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            NoiseModel::None => 0.0,
            NoiseModel::Gaussian { std } => std * rng.sample::<f64, _>(StandardNormal),
            NoiseModel::LogNormal => LogNormal::new(0.0, 1.0).unwrap().sample(rng),
            NoiseModel::Uniform => rng.random::<f64>(),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            NoiseModel::None | NoiseModel::Gaussian { .. } => 0.0,
            NoiseModel::LogNormal => 0.5f64.exp(),
            NoiseModel::Uniform => 0.5,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            NoiseModel::None => 0.0,
            NoiseModel::Gaussian { std } => std * std,
            NoiseModel::LogNormal => {
                let e = std::f64::consts::E;
                e * (e - 1.0)
            }
            NoiseModel::Uniform => 1.0 / 12.0,
        }
    }

    pub fn label(&self) -> String {
        match *self {
            NoiseModel::None => "none".into(),
            NoiseModel::Gaussian { std } => format!("gaussian(0,{std})"),
            NoiseModel::LogNormal => "lognormal(0,1)".into(),
            NoiseModel::Uniform => "uniform(0,1)".into(),
        }
    }
}

/// Fixed divisors applied to agent-state blocks before they reach the networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureScales {
    pub position: f64,
    pub derivative: f64,
    pub innovation: f64,
}

impl Default for FeatureScales {
    fn default() -> Self {
        Self {
            position: 20.0,
            derivative: 200.0,
            innovation: 5.0,
        }
    }
}

impl FeatureScales {
    pub fn to_vec(self) -> Vec<f64> {
        vec![self.position, self.derivative, self.innovation]
    }

    pub fn from_slice(s: &[f64]) -> Result<Self> {
        match *s {
            [position, derivative, innovation] => Ok(Self {
                position,
                derivative,
                innovation,
            }),
            _ => Err(Error::dims("feature scales", 3, s.len())),
        }
    }
}

pub fn agent_state_dim(steps_per_obs: usize, op: &ObservationOperator) -> usize {
    6 * (steps_per_obs + 1) + op.dim()
}

/// `[x, x_dot]` at every model step of the window, then the innovation `y - H x_f`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    values: Vec<f64>,
    obs_dim: usize,
}

impl AgentState {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn innovation(&self) -> &[f64] {
        &self.values[self.values.len() - self.obs_dim..]
    }

    /// Network input: every block divided by its scale.
    pub fn features(&self, scales: &FeatureScales) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.values.len());
        self.write_features(scales, &mut out);
        out
    }

    pub fn write_features(&self, scales: &FeatureScales, out: &mut Vec<f64>) {
        let n_pair_values = self.values.len() - self.obs_dim;
        for chunk in self.values[..n_pair_values].chunks_exact(6) {
            out.extend(chunk[..3].iter().map(|v| v / scales.position));
            out.extend(chunk[3..].iter().map(|v| v / scales.derivative));
        }
        out.extend(self.innovation().iter().map(|v| v / scales.innovation));
    }
}

pub fn build_agent_state(
    forecast: &[(StateVec, StateVec)],
    observation: &[f64],
    op: &ObservationOperator,
    steps_per_obs: usize,
) -> Result<AgentState> {
    if forecast.len() != steps_per_obs + 1 {
        return Err(Error::dims(
            "build_agent_state forecast pairs",
            steps_per_obs + 1,
            forecast.len(),
        ));
    }
    if observation.len() != op.dim() {
        return Err(Error::dims("build_agent_state observation", op.dim(), observation.len()));
    }
    let mut values = Vec::with_capacity(agent_state_dim(steps_per_obs, op));
    for (x, dx) in forecast {
        values.extend_from_slice(&x.to_array());
        values.extend_from_slice(&dx.to_array());
    }
    let end = forecast.last().unwrap().0;
    values.extend(op.project(&end).iter().zip(observation).map(|(h, y)| y - h));
    Ok(AgentState {
        values,
        obs_dim: op.dim(),
    })
}

/// `-RMSE(y, H x_f)` over the observed components.
pub fn reward(observation: &[f64], forecast: &StateVec, op: &ObservationOperator) -> f64 {
    let proj = op.project(forecast);
    let mse = proj
        .iter()
        .zip(observation)
        .map(|(h, y)| (y - h).powi(2))
        .sum::<f64>()
        / proj.len() as f64;
    -mse.sqrt()
}

/// Everything that defines one twin experiment except its random draws.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinConfig {
    pub params: LorenzParams,
    pub grid: TimeGrid,
    pub op: ObservationOperator,
    pub noise: NoiseModel,
    /// Number of observation intervals; observations exist at `k * steps_per_obs`
    /// for `k = 0..=n_intervals`.
    pub n_intervals: usize,
}

impl TwinConfig {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.noise.validate()?;
        if self.n_intervals == 0 {
            return Err(Error::invalid("n_intervals", "must be at least 1"));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        self.n_intervals * self.grid.steps_per_obs
    }

    /// Intervals covering `horizon` model time units.
    pub fn intervals_for(grid: &TimeGrid, horizon: f64) -> usize {
        (grid.steps_for(horizon) / grid.steps_per_obs).max(1)
    }
}

/// A reference trajectory with its observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Twin {
    /// State at every model step of the experiment window.
    pub reference: Vec<StateVec>,
    /// `observations[k]` is taken at model step `k * steps_per_obs`.
    pub observations: Vec<Vec<f64>>,
    pub steps_per_obs: usize,
}

impl Twin {
    pub fn n_intervals(&self) -> usize {
        self.observations.len() - 1
    }

    pub fn reference_at_obs(&self, k: usize) -> StateVec {
        self.reference[k * self.steps_per_obs]
    }
}

/// A jittered start integrated onto the attractor.
pub fn spun_up_state(params: &LorenzParams, dt: f64, rng: &mut Rng) -> Result<StateVec> {
    let jitter = StateVec::new(
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
        rng.random_range(-1.0..=1.0),
    );
    let steps = (SPIN_UP_TIME / dt).round() as usize;
    dynamics::advance(REFERENCE_START + jitter, params, dt, steps)
}

/// Spun-up reference plus noisy observations, fully determined by `seed`.
pub fn generate_twin(cfg: &TwinConfig, seed: u64) -> Result<Twin> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, &[tag::TWIN]);
    let start = spun_up_state(&cfg.params, cfg.grid.dt, &mut rng)?;
    let reference: Vec<StateVec> = dynamics::integrate(start, &cfg.params, &cfg.grid, cfg.n_steps())?
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    let observations = (0..=cfg.n_intervals)
        .map(|k| {
            let truth = reference[k * cfg.grid.steps_per_obs];
            cfg.op
                .project(&truth)
                .into_iter()
                .map(|v| v + cfg.noise.sample(&mut rng))
                .collect()
        })
        .collect();
    Ok(Twin {
        reference,
        observations,
        steps_per_obs: cfg.grid.steps_per_obs,
    })
}

/// First-guess state: observed components from the observation, the rest climatological.
pub fn initial_state(observation: &[f64], op: &ObservationOperator, params: &LorenzParams) -> StateVec {
    op.lift(observation, climatological_mean(params))
}

/// One completed correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AssimilationCycle {
    /// `[x, x_dot]` over the window ending at the observation time.
    pub forecast: Vec<(StateVec, StateVec)>,
    pub observation: Vec<f64>,
    pub analysis: StateVec,
    /// Reward earned by this correction, measured at the next observation.
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleOutcome {
    pub cycle: AssimilationCycle,
    pub next_state: Option<AgentState>,
    pub reward: f64,
    pub done: bool,
    pub diverged: bool,
}

/// Training environment: a fresh twin per episode, `n_cycles` rewarded corrections.
#[derive(Debug, Clone)]
pub struct DaEnv {
    twin_cfg: TwinConfig,
    scales: FeatureScales,
    n_cycles: usize,
    twin: Option<Twin>,
    /// Index of the observation the pending correction applies to.
    obs_index: usize,
    forecast: Vec<(StateVec, StateVec)>,
    state: Option<AgentState>,
}

impl DaEnv {
    /// `twin_cfg.n_intervals` is overridden to fit `n_cycles` corrections.
    pub fn new(mut twin_cfg: TwinConfig, scales: FeatureScales, n_cycles: usize) -> Result<Self> {
        if n_cycles == 0 {
            return Err(Error::invalid("n_assim_per_episode", "must be at least 1"));
        }
        twin_cfg.n_intervals = n_cycles + 1;
        twin_cfg.validate()?;
        Ok(Self {
            twin_cfg,
            scales,
            n_cycles,
            twin: None,
            obs_index: 0,
            forecast: Vec::new(),
            state: None,
        })
    }

    pub fn scales(&self) -> &FeatureScales {
        &self.scales
    }

    pub fn twin(&self) -> Option<&Twin> {
        self.twin.as_ref()
    }

    pub fn agent_state(&self) -> Option<&AgentState> {
        self.state.as_ref()
    }

    /// Starts an episode on a given twin; returns the first agent state.
    pub fn reset_with(&mut self, twin: Twin) -> Result<AgentState> {
        let op = self.twin_cfg.op;
        let x0 = initial_state(&twin.observations[0], &op, &self.twin_cfg.params);
        self.forecast = dynamics::integrate(
            x0,
            &self.twin_cfg.params,
            &self.twin_cfg.grid,
            self.twin_cfg.grid.steps_per_obs,
        )?;
        let state = build_agent_state(
            &self.forecast,
            &twin.observations[1],
            &op,
            self.twin_cfg.grid.steps_per_obs,
        )?;
        self.obs_index = 1;
        self.twin = Some(twin);
        self.state = Some(state.clone());
        Ok(state)
    }

    /// Applies `action` at the pending observation, forecasts to the next one and
    /// scores that forecast.
    pub fn step_cycle(&mut self, action: &Action) -> Result<CycleOutcome> {
        let twin = self
            .twin
            .as_ref()
            .ok_or_else(|| Error::invalid("env", "step called before reset"))?;
        let op = self.twin_cfg.op;
        let x_f = self.forecast.last().unwrap().0;
        let analysis = x_f + StateVec::from_array(*action);
        let observation = twin.observations[self.obs_index].clone();
        let next_obs_index = self.obs_index + 1;
        let done_by_count = next_obs_index > self.n_cycles;
        let window = dynamics::integrate(
            analysis,
            &self.twin_cfg.params,
            &self.twin_cfg.grid,
            self.twin_cfg.grid.steps_per_obs,
        );
        let cycle_forecast = std::mem::take(&mut self.forecast);
        match window {
            Ok(window) => {
                let y_next = &twin.observations[next_obs_index];
                let r = reward(y_next, &window.last().unwrap().0, &op);
                let next = build_agent_state(&window, y_next, &op, self.twin_cfg.grid.steps_per_obs)?;
                self.forecast = window;
                self.obs_index = next_obs_index;
                self.state = Some(next.clone());
                Ok(CycleOutcome {
                    cycle: AssimilationCycle {
                        forecast: cycle_forecast,
                        observation,
                        analysis,
                        reward: r,
                    },
                    next_state: Some(next),
                    reward: r,
                    done: done_by_count,
                    diverged: false,
                })
            }
            Err(Error::Divergence { .. }) => {
                self.twin = None;
                self.state = None;
                Ok(CycleOutcome {
                    cycle: AssimilationCycle {
                        forecast: cycle_forecast,
                        observation,
                        analysis,
                        reward: DIVERGENCE_REWARD,
                    },
                    next_state: None,
                    reward: DIVERGENCE_REWARD,
                    done: true,
                    diverged: true,
                })
            }
            Err(e) => Err(e),
        }
    }
}

impl Environment for DaEnv {
    fn observation_dim(&self) -> usize {
        agent_state_dim(self.twin_cfg.grid.steps_per_obs, &self.twin_cfg.op)
    }

    fn reset(&mut self, seed: u64) -> Result<Vec<f64>> {
        let twin = generate_twin(&self.twin_cfg, seed)?;
        Ok(self.reset_with(twin)?.features(&self.scales))
    }

    fn step(&mut self, action: &Action) -> Step {
        let dim = self.observation_dim();
        match self.step_cycle(action) {
            Ok(out) => Step {
                observation: out
                    .next_state
                    .map(|s| s.features(&self.scales))
                    .unwrap_or_else(|| vec![0.0; dim]),
                reward: out.reward,
                done: out.done,
                terminal: out.diverged,
            },
            Err(_) => Step {
                observation: vec![0.0; dim],
                reward: DIVERGENCE_REWARD,
                done: true,
                terminal: true,
            },
        }
    }
}

/// Static description of an RL evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct AssimilationSetup {
    pub params: LorenzParams,
    pub grid: TimeGrid,
    pub op: ObservationOperator,
    pub scales: FeatureScales,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RlMode {
    /// Mean action every cycle.
    Deterministic,
    /// `n` independently sampled trajectories.
    Ensemble(usize),
}

/// Members' forecast and analysis at one observation time.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberSnapshot {
    pub obs_index: usize,
    pub forecast: Vec<StateVec>,
    pub analysis: Vec<StateVec>,
}

impl MemberSnapshot {
    pub fn corrections(&self) -> Vec<StateVec> {
        self.analysis
            .iter()
            .zip(&self.forecast)
            .map(|(a, f)| *a - *f)
            .collect()
    }
}

/// Output of an assimilation run, sampled at every model step.
#[derive(Debug, Clone, PartialEq)]
pub struct AssimilationRun {
    /// Member mean (the single trajectory in deterministic mode).
    pub mean_path: Vec<StateVec>,
    pub mean_rmse: Vec<f64>,
    /// Time-averaged RMSE of each member against the reference.
    pub member_rmse: Vec<f64>,
    /// Full member paths, when requested.
    pub member_paths: Option<Vec<Vec<StateVec>>>,
    pub snapshot: Option<MemberSnapshot>,
}

impl AssimilationRun {
    pub fn time_averaged_rmse(&self) -> f64 {
        mean(&self.mean_rmse)
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Observation index at which to record member forecasts and analyses.
    pub snapshot_at: Option<usize>,
    pub keep_member_paths: bool,
}

/// Streams member states into the mean path and per-member error sums, so long
/// runs never hold every member trajectory unless asked to.
pub(crate) struct PathAccumulator<'a> {
    reference: &'a [StateVec],
    sum: Vec<StateVec>,
    err_sum: Vec<f64>,
    paths: Option<Vec<Vec<StateVec>>>,
}

impl<'a> PathAccumulator<'a> {
    pub(crate) fn new(reference: &'a [StateVec], n_members: usize, keep: bool) -> Self {
        Self {
            reference,
            sum: vec![StateVec::ZERO; reference.len()],
            err_sum: vec![0.0; n_members],
            paths: keep.then(|| vec![Vec::with_capacity(reference.len()); n_members]),
        }
    }

    /// Members must be recorded in index order for each step.
    pub(crate) fn record(&mut self, member: usize, step: usize, s: StateVec) {
        self.sum[step] += s;
        self.err_sum[member] += s.rmse(&self.reference[step]);
        if let Some(p) = &mut self.paths {
            p[member].push(s);
        }
    }

    pub(crate) fn finish(self, snapshot: Option<MemberSnapshot>) -> AssimilationRun {
        let n = self.err_sum.len() as f64;
        let steps = self.reference.len() as f64;
        let mean_path: Vec<StateVec> = self.sum.into_iter().map(|s| s * (1.0 / n)).collect();
        let mean_rmse = mean_path
            .iter()
            .zip(self.reference)
            .map(|(a, r)| a.rmse(r))
            .collect();
        AssimilationRun {
            mean_path,
            mean_rmse,
            member_rmse: self.err_sum.into_iter().map(|e| e / steps).collect(),
            member_paths: self.paths,
            snapshot,
        }
    }
}

/// Member RNG seeds for an ensemble run.
pub fn member_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n)
        .map(|i| rng::derive_seed(seed, &[tag::MEMBER, i as u64]))
        .collect()
}

/// Runs the trained corrector over a twin in the requested mode.
pub fn run_rl_assimilation<M: ActionModel + ?Sized>(
    model: &M,
    setup: &AssimilationSetup,
    twin: &Twin,
    mode: RlMode,
    seed: u64,
    opts: &RunOptions,
) -> Result<AssimilationRun> {
    match mode {
        RlMode::Deterministic => run_members(model, setup, twin, None, opts),
        RlMode::Ensemble(0) => Err(Error::invalid("ensemble size", "must be at least 1")),
        RlMode::Ensemble(n) => run_members(model, setup, twin, Some(&member_seeds(seed, n)), opts),
    }
}

/// Evolves one member per seed (or a single deterministic member when `seeds` is
/// `None`). Members never exchange information; batching is only for speed.
pub fn run_members<M: ActionModel + ?Sized>(
    model: &M,
    setup: &AssimilationSetup,
    twin: &Twin,
    seeds: Option<&[u64]>,
    opts: &RunOptions,
) -> Result<AssimilationRun> {
    let t_obs = setup.grid.steps_per_obs;
    if twin.steps_per_obs != t_obs {
        return Err(Error::dims("twin steps_per_obs", t_obs, twin.steps_per_obs));
    }
    let dim = agent_state_dim(t_obs, &setup.op);
    if model.input_dim() != dim {
        return Err(Error::dims("policy input", dim, model.input_dim()));
    }
    let n = seeds.map_or(1, |s| s.len());
    let mut rngs: Vec<Rng> = seeds
        .map(|s| s.iter().map(|&sd| rng::stream(sd, &[tag::RL])).collect())
        .unwrap_or_default();
    let log_std = model.log_std();
    let x0 = initial_state(&twin.observations[0], &setup.op, &setup.params);
    let mut current = vec![x0; n];
    let mut acc = PathAccumulator::new(&twin.reference, n, opts.keep_member_paths);
    for i in 0..n {
        acc.record(i, 0, x0);
    }
    let mut snapshot = None;
    let mut inputs = Vec::with_capacity(n * dim);
    let mut windows = Vec::with_capacity(n);
    for k in 1..=twin.n_intervals() {
        inputs.clear();
        windows.clear();
        for x in &current {
            let window = dynamics::integrate(*x, &setup.params, &setup.grid, t_obs)?;
            build_agent_state(&window, &twin.observations[k], &setup.op, t_obs)?
                .write_features(&setup.scales, &mut inputs);
            windows.push(window);
        }
        let start = (k - 1) * t_obs;
        for j in 1..t_obs {
            for (i, w) in windows.iter().enumerate() {
                acc.record(i, start + j, w[j].0);
            }
        }
        let forecasts: Vec<StateVec> = windows.iter().map(|w| w[t_obs].0).collect();
        let means = model.mean_actions(&inputs, n)?;
        for i in 0..n {
            let mu = &means[i * ACTION_DIM..(i + 1) * ACTION_DIM];
            let action = match rngs.get_mut(i) {
                Some(r) => sample_gaussian(mu, &log_std, r).0,
                None => [mu[0], mu[1], mu[2]],
            };
            current[i] = forecasts[i] + StateVec::from_array(action);
            dynamics::check_bounded(current[i], k * t_obs)?;
            acc.record(i, k * t_obs, current[i]);
        }
        if opts.snapshot_at == Some(k) {
            snapshot = Some(MemberSnapshot {
                obs_index: k,
                forecast: forecasts,
                analysis: current.clone(),
            });
        }
    }
    Ok(acc.finish(snapshot))
}

/// The uncorrected forecast from the same first guess, for reference.
pub fn free_run(setup: &AssimilationSetup, twin: &Twin) -> Result<AssimilationRun> {
    let x0 = initial_state(&twin.observations[0], &setup.op, &setup.params);
    let mut acc = PathAccumulator::new(&twin.reference, 1, false);
    let path = dynamics::integrate(x0, &setup.params, &setup.grid, twin.reference.len() - 1)?;
    for (t, (s, _)) in path.into_iter().enumerate() {
        acc.record(0, t, s);
    }
    Ok(acc.finish(None))
}

/// Corrects by the innovation itself, zero on unobserved components. With noise-free
/// full observations this snaps every analysis onto the reference.
#[derive(Debug, Clone, PartialEq)]
pub struct InnovationPolicy {
    pub input_dim: usize,
    pub op: ObservationOperator,
    pub scales: FeatureScales,
    pub log_std: [f64; ACTION_DIM],
}

impl InnovationPolicy {
    pub fn new(steps_per_obs: usize, op: ObservationOperator, scales: FeatureScales) -> Self {
        Self {
            input_dim: agent_state_dim(steps_per_obs, &op),
            op,
            scales,
            log_std: [LOG_STD_MIN; ACTION_DIM],
        }
    }
}

impl ActionModel for InnovationPolicy {
    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn mean_actions(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        if inputs.len() != batch * self.input_dim {
            return Err(Error::dims("InnovationPolicy inputs", batch * self.input_dim, inputs.len()));
        }
        let p = self.op.dim();
        let mut out = Vec::with_capacity(batch * ACTION_DIM);
        for row in inputs.chunks_exact(self.input_dim) {
            let innov: Vec<f64> = row[self.input_dim - p..]
                .iter()
                .map(|v| v * self.scales.innovation)
                .collect();
            out.extend_from_slice(&self.op.lift(&innov, StateVec::ZERO).to_array());
        }
        Ok(out)
    }

    fn log_std(&self) -> [f64; ACTION_DIM] {
        self.log_std
    }
}

/// Three independent `N(0, std^2)` components.
pub fn gaussian_vector(rng: &mut Rng, std: f64) -> StateVec {
    let d = Normal::new(0.0, std).unwrap();
    StateVec::new(d.sample(rng), d.sample(rng), d.sample(rng))
}
