//! Experiment configuration files and the per-experiment PPO hyperparameter registry.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{LorenzParams, TimeGrid, DEFAULT_DT};
use crate::enkf::{EnkfConfig, EnkfSetup};
use crate::envda::{AssimilationSetup, FeatureScales, NoiseModel, ObservationOperator, TwinConfig};
use crate::error::{ConfigError, Error, Result};
use crate::ppo::PpoHyperparams;

pub const SUPPORTED_STEPS_PER_OBS: [usize; 3] = [5, 50, 100];
/// `R` floor for noise-free observations, where the noise variance is zero.
pub const NOISE_FREE_OBS_STD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    RlSingle,
    RlEnsemble,
    Enkf,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::RlSingle, Method::RlEnsemble, Method::Enkf];

    pub fn label(self) -> &'static str {
        match self {
            Method::RlSingle => "rl-single",
            Method::RlEnsemble => "rl-ensemble",
            Method::Enkf => "enkf",
        }
    }

    pub fn uses_policy(self) -> bool {
        !matches!(self, Method::Enkf)
    }
}

/// PPO settings as written in a config; unset registry fields are looked up.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoOverrides {
    pub gamma: Option<f64>,
    pub clip_epsilon: Option<f64>,
    pub value_coef: Option<f64>,
    pub max_grad_norm: Option<f64>,
    pub n_assim_per_episode: Option<usize>,
    pub learning_rate: Option<f64>,
    pub epochs_per_update: Option<usize>,
    pub minibatch_size: Option<usize>,
    pub n_workers: Option<usize>,
    pub total_episodes: Option<usize>,
    pub hidden_sizes: Option<Vec<usize>>,
    pub log_std_init: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub steps_per_obs: usize,
    /// Observed components as a 0/1 string, e.g. `"101"`.
    #[serde(default = "default_mask")]
    pub mask: String,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    /// Members in the RL Monte-Carlo ensemble.
    #[serde(default = "default_rl_ensemble")]
    pub rl_ensemble_size: usize,
    /// Write every n-th model step to trajectory and curve files.
    #[serde(default = "default_stride")]
    pub export_stride: usize,
    /// Diverged (method, repetition) runs tolerated before the run is flagged.
    #[serde(default)]
    pub divergence_budget: usize,
    #[serde(default = "default_sweep")]
    pub sweep_sizes: Vec<usize>,
    pub histogram_time: Option<f64>,
    pub noise: NoiseModel,
    #[serde(default)]
    pub lorenz: LorenzParams,
    #[serde(default)]
    pub features: FeatureScales,
    #[serde(default)]
    pub ppo: PpoOverrides,
    #[serde(default)]
    pub enkf: EnkfConfig,
}

fn default_mask() -> String {
    "111".into()
}
fn default_horizon() -> f64 {
    50.0
}
fn default_repetitions() -> usize {
    50
}
fn default_dt() -> f64 {
    DEFAULT_DT
}
fn default_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn default_rl_ensemble() -> usize {
    50
}
fn default_stride() -> usize {
    1
}
fn default_sweep() -> Vec<usize> {
    vec![1, 5, 10, 25, 50]
}

impl ExperimentConfig {
    pub fn from_toml(src: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(src).map_err(|e| {
            let line = e.span().map(|s| line_of(src, s.start));
            let message = e.message().to_string();
            ConfigError {
                field: field_from_message(&message),
                line,
                message,
            }
        })?;
        cfg.validate().map_err(|e| locate(e, src))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let src = std::fs::read_to_string(path)?;
        Self::from_toml(&src)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| -> Result<()> {
            Err(ConfigError {
                field: field.into(),
                line: None,
                message,
            }
            .into())
        };
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad("name", "must be a non-empty plain file name".into());
        }
        if !SUPPORTED_STEPS_PER_OBS.contains(&self.steps_per_obs) {
            return bad(
                "steps_per_obs",
                format!("must be one of {SUPPORTED_STEPS_PER_OBS:?}, got {}", self.steps_per_obs),
            );
        }
        if let Err(e) = ObservationOperator::parse(&self.mask) {
            return bad("mask", e.to_string());
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return bad("dt", format!("must be positive, got {}", self.dt));
        }
        let window = self.dt * self.steps_per_obs as f64;
        if !(self.horizon.is_finite() && self.horizon >= window) {
            return bad("horizon", format!("must cover at least one observation interval ({window})"));
        }
        if self.repetitions == 0 {
            return bad("repetitions", "must be at least 1".into());
        }
        if self.methods.is_empty() {
            return bad("methods", "list at least one method".into());
        }
        if self.rl_ensemble_size == 0 {
            return bad("rl_ensemble_size", "must be at least 1".into());
        }
        if self.export_stride == 0 {
            return bad("export_stride", "must be at least 1".into());
        }
        if self.sweep_sizes.contains(&0) {
            return bad("sweep_sizes", "sizes must be positive".into());
        }
        if let Some(t) = self.histogram_time {
            if let Err(e) = self.observation_index(t) {
                return bad("histogram_time", e.to_string());
            }
        }
        if let Err(e) = self.noise.validate() {
            return bad("noise.std", e.to_string());
        }
        if let Err(e) = self.lorenz.validate() {
            return bad("lorenz", e.to_string());
        }
        let f = &self.features;
        for (name, v) in [("features.position", f.position), ("features.derivative", f.derivative), ("features.innovation", f.innovation)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(name, format!("must be positive, got {v}"));
            }
        }
        if let Err(e) = self.enkf.validate() {
            let field = match &e {
                Error::InvalidParameter { name, .. } => *name,
                _ => "enkf",
            };
            return bad(field, e.to_string());
        }
        match self.hyperparams() {
            Ok(hp) => {
                if let Err(e) = hp.validate() {
                    let field = match &e {
                        Error::InvalidParameter { name, .. } => format!("ppo.{name}"),
                        _ => "ppo".into(),
                    };
                    return bad(&field, e.to_string());
                }
            }
            Err(e) => return bad("ppo", e.to_string()),
        }
        Ok(())
    }

    pub fn op(&self) -> ObservationOperator {
        ObservationOperator::parse(&self.mask).expect("validated mask")
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid::new(self.dt, self.steps_per_obs).expect("validated grid")
    }

    pub fn n_intervals(&self) -> usize {
        TwinConfig::intervals_for(&self.grid(), self.horizon)
    }

    pub fn twin_config(&self) -> TwinConfig {
        TwinConfig {
            params: self.lorenz,
            grid: self.grid(),
            op: self.op(),
            noise: self.noise,
            n_intervals: self.n_intervals(),
        }
    }

    pub fn assimilation_setup(&self) -> AssimilationSetup {
        AssimilationSetup {
            params: self.lorenz,
            grid: self.grid(),
            op: self.op(),
            scales: self.features,
        }
    }

    /// `R` std: explicit, else the noise model's std, floored for noise-free data.
    pub fn obs_error_std(&self) -> f64 {
        self.enkf
            .obs_error_std
            .unwrap_or_else(|| self.noise.variance().sqrt().max(NOISE_FREE_OBS_STD))
    }

    pub fn enkf_setup(&self, ensemble_size: usize) -> EnkfSetup {
        EnkfSetup {
            params: self.lorenz,
            grid: self.grid(),
            op: self.op(),
            cfg: EnkfConfig {
                ensemble_size,
                ..self.enkf.clone()
            },
            obs_error_std: self.obs_error_std(),
        }
    }

    pub fn registry_key(&self) -> RegistryKey {
        RegistryKey {
            noise: self.noise,
            steps_per_obs: self.steps_per_obs,
            mask: self.op().mask(),
        }
    }

    /// Defaults, then the registry row for this experiment, then explicit overrides.
    /// Errors when there is no registry row and the four tuned values are not all given.
    pub fn hyperparams(&self) -> Result<PpoHyperparams> {
        let o = &self.ppo;
        let mut hp = PpoHyperparams::default();
        match registry_lookup(&self.registry_key()) {
            Ok(row) => row.apply(&mut hp),
            Err(e) => {
                if o.gamma.is_none() || o.max_grad_norm.is_none() || o.value_coef.is_none() || o.n_assim_per_episode.is_none() {
                    return Err(e);
                }
            }
        }
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = o.$f.clone() { hp.$f = v; } )* };
        }
        set!(gamma, clip_epsilon, value_coef, max_grad_norm, n_assim_per_episode, learning_rate,
             epochs_per_update, minibatch_size, n_workers, total_episodes, hidden_sizes, log_std_init);
        Ok(hp)
    }

    /// Observation index for model time `t`, or the neighbouring valid times.
    pub fn observation_index(&self, t: f64) -> Result<usize> {
        let t_obs = self.dt * self.steps_per_obs as f64;
        let k_max = self.n_intervals();
        let k = (t / t_obs).round();
        if t.is_finite() && (k * t_obs - t).abs() <= 1e-9 * t_obs.max(1.0) && k >= 1.0 && k as usize <= k_max {
            return Ok(k as usize);
        }
        // model-step products keep the reported times free of accumulated rounding
        let time_of = |k: f64| (k.clamp(1.0, k_max as f64) * self.steps_per_obs as f64) * self.dt;
        let below = time_of((t / t_obs).floor());
        let above = time_of((t / t_obs).ceil());
        Err(Error::NotObservationTime {
            requested: t,
            below,
            above,
        })
    }
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

fn field_from_message(msg: &str) -> String {
    // serde messages quote the offending key: "unknown field `foo`", "missing field `bar`"
    msg.split('`').nth(1).unwrap_or("config").to_string()
}

/// Attaches the line of the offending key, when it appears literally in the source.
fn locate(e: Error, src: &str) -> Error {
    let Error::Config(mut ce) = e else { return e };
    let key = ce.field.rsplit('.').next().unwrap_or(&ce.field).to_string();
    ce.line = src.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(key.as_str())
            .is_some_and(|rest| rest.trim_start().starts_with('='))
    })
    .map(|i| i + 1)
    .or_else(|| {
        let section = format!("[{}]", ce.field.split('.').next().unwrap_or(""));
        src.lines().position(|l| l.trim() == section).map(|i| i + 1)
    });
    Error::Config(ce)
}

/// Identifies an experiment: noise model, observation interval and observed components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistryKey {
    pub noise: NoiseModel,
    pub steps_per_obs: usize,
    pub mask: [bool; 3],
}

impl std::fmt::Display for RegistryKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let m: String = self.mask.iter().map(|&b| if b { '1' } else { '0' }).collect();
        write!(f, "({}, {}, {m})", self.noise.label(), self.steps_per_obs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistryRow {
    pub family: &'static str,
    pub key: RegistryKey,
    pub gamma: f64,
    pub max_grad_norm: f64,
    pub value_coef: f64,
    pub n_assim_per_episode: usize,
}

impl RegistryRow {
    pub fn apply(&self, hp: &mut PpoHyperparams) {
        hp.gamma = self.gamma;
        hp.max_grad_norm = self.max_grad_norm;
        hp.value_coef = self.value_coef;
        hp.n_assim_per_episode = self.n_assim_per_episode;
    }
}

const FULL: [bool; 3] = [true, true, true];

const fn row(
    family: &'static str,
    noise: NoiseModel,
    steps_per_obs: usize,
    mask: [bool; 3],
    v: (f64, f64, f64, usize),
) -> RegistryRow {
    RegistryRow {
        family,
        key: RegistryKey {
            noise,
            steps_per_obs,
            mask,
        },
        gamma: v.0,
        max_grad_norm: v.1,
        value_coef: v.2,
        n_assim_per_episode: v.3,
    }
}

const N1: NoiseModel = NoiseModel::Gaussian { std: 1.0 };

/// Tuned (gamma, max_grad_norm, value_coef, n_assim_per_episode) per experiment,
/// grouped by experiment family. The unit-Gaussian, 50-step, fully observed case
/// belongs to three families and is listed in each.
pub const REGISTRY: [RegistryRow; 15] = [
    row("tracking", NoiseModel::None, 5, FULL, (0.9, 0.9, 0.7, 100)),
    row("tracking", NoiseModel::None, 50, FULL, (0.1, 0.8, 0.7, 100)),
    row("tracking", NoiseModel::None, 100, FULL, (0.1, 0.9, 0.7, 100)),
    row("noise-level", N1, 50, FULL, (0.9, 0.95, 0.95, 1000)),
    row("noise-level", NoiseModel::Gaussian { std: 2.0 }, 50, FULL, (0.05, 0.8, 0.7, 1000)),
    row("noise-level", NoiseModel::Gaussian { std: 3.0 }, 50, FULL, (0.1, 0.9, 0.9, 1000)),
    row("frequency", N1, 5, FULL, (0.25, 0.8, 0.7, 100)),
    row("frequency", N1, 50, FULL, (0.9, 0.95, 0.95, 1000)),
    row("frequency", N1, 100, FULL, (0.05, 0.95, 0.9, 1000)),
    row("noise-type", N1, 50, FULL, (0.9, 0.95, 0.95, 1000)),
    row("noise-type", NoiseModel::LogNormal, 50, FULL, (0.8, 0.85, 0.95, 100)),
    row("noise-type", NoiseModel::Uniform, 50, FULL, (0.1, 0.9, 0.8, 100)),
    row("partial", N1, 50, [true, false, false], (0.25, 0.8, 0.8, 500)),
    row("partial", N1, 50, [true, true, false], (0.3, 0.9, 0.7, 500)),
    row("partial", N1, 50, [true, false, true], (0.25, 0.8, 0.95, 1000)),
];

pub fn registry_lookup(key: &RegistryKey) -> Result<RegistryRow> {
    REGISTRY
        .iter()
        .find(|r| r.key == *key)
        .copied()
        .ok_or_else(|| Error::UnknownHyperparams(key.to_string()))
}
