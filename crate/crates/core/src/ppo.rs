//! Proximal policy optimisation with a diagonal Gaussian policy and a separate critic.
//!
//! Value targets are n-step discounted returns bootstrapped from the critic at the end
//! of each collected segment; advantages are `v_target - V_old(s)`, normalised per
//! minibatch before entering the clipped surrogate.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{adam_step, clip_joint, AdamState, Checkpoint, Gradients, Mlp, Role, Trace};
use crate::rng::{self, tag, Rng};

/// Corrections always act on the full 3-component state.
pub const ACTION_DIM: usize = 3;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub type Action = [f64; ACTION_DIM];

/// Anything that maps a batch of agent-state feature vectors to Gaussian action means.
pub trait ActionModel: Sync {
    fn input_dim(&self) -> usize;
    /// `batch x ACTION_DIM` means for `batch` row-major inputs.
    fn mean_actions(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>>;
    fn log_std(&self) -> [f64; ACTION_DIM];
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    pub mean: Mlp,
    pub log_std: [f64; ACTION_DIM],
}

impl GaussianPolicy {
    pub fn new(input_dim: usize, hidden: &[usize], log_std_init: f64, seed: u64) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(ACTION_DIM);
        Self::from_parts(Mlp::new(&sizes, seed)?, [log_std_init; ACTION_DIM])
    }

    pub fn from_parts(mean: Mlp, log_std: [f64; ACTION_DIM]) -> Result<Self> {
        if mean.output_dim() != ACTION_DIM {
            return Err(Error::dims("GaussianPolicy output", ACTION_DIM, mean.output_dim()));
        }
        let mut p = Self { mean, log_std };
        p.clamp_log_std();
        Ok(p)
    }

    pub fn clamp_log_std(&mut self) {
        self.log_std
            .iter_mut()
            .for_each(|l| *l = l.clamp(LOG_STD_MIN, LOG_STD_MAX));
    }

    pub fn deterministic_action(&self, state: &[f64]) -> Result<Action> {
        let m = self.mean.forward(state)?;
        Ok([m[0], m[1], m[2]])
    }

    pub fn sample_action(&self, state: &[f64], rng: &mut Rng) -> Result<(Action, f64)> {
        let mean = self.deterministic_action(state)?;
        Ok(sample_gaussian(&mean, &self.log_std, rng))
    }

    pub fn log_prob(&self, state: &[f64], action: &Action) -> Result<f64> {
        Ok(gaussian_log_prob(
            &self.deterministic_action(state)?,
            &self.log_std,
            action,
        ))
    }

    pub fn to_checkpoint(&self, input_scales: &[f64]) -> Checkpoint {
        Checkpoint {
            role: Role::Actor,
            net: self.mean.clone(),
            input_scales: input_scales.to_vec(),
            extra: self.log_std.to_vec(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.role != Role::Actor {
            return Err(Error::Checkpoint("expected an actor checkpoint".into()));
        }
        let log_std: Action = ck
            .extra
            .as_slice()
            .try_into()
            .map_err(|_| Error::Checkpoint("actor checkpoint needs 3 log-std values".into()))?;
        Self::from_parts(ck.net.clone(), log_std)
    }
}

impl ActionModel for GaussianPolicy {
    fn input_dim(&self) -> usize {
        self.mean.input_dim()
    }

    fn mean_actions(&self, inputs: &[f64], batch: usize) -> Result<Vec<f64>> {
        self.mean.forward_batch(inputs, batch)
    }

    fn log_std(&self) -> [f64; ACTION_DIM] {
        self.log_std
    }
}

/// Draws `mean + exp(log_std) * xi` and returns it with its log-density.
pub fn sample_gaussian(mean: &[f64], log_std: &[f64; ACTION_DIM], rng: &mut Rng) -> (Action, f64) {
    let mut a = [0.0; ACTION_DIM];
    for j in 0..ACTION_DIM {
        let xi: f64 = rng.sample(StandardNormal);
        a[j] = mean[j] + log_std[j].exp() * xi;
    }
    let lp = gaussian_log_prob(mean, log_std, &a);
    (a, lp)
}

pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64; ACTION_DIM], action: &[f64]) -> f64 {
    (0..ACTION_DIM)
        .map(|j| {
            let z = (action[j] - mean[j]) / log_std[j].exp();
            -0.5 * z * z - log_std[j] - 0.5 * LN_2PI
        })
        .sum()
}

/// One agent-environment interaction.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub log_prob_old: f64,
    pub value_old: f64,
    /// Terminal: no bootstrapping past this transition.
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvantageRecord {
    pub v_target: f64,
    pub advantage: f64,
}

/// n-step discounted targets over one contiguous segment.
///
/// `v_target(t) = sum_i gamma^i r_{t+i} + gamma^(T-t) V_old(s_T)`, with the bootstrap
/// dropped after a terminal transition. The critic is only evaluated on the final
/// `next_state`; `value_old` supplies `V_old(s_t)`.
pub fn compute_returns_and_advantages(
    transitions: &[Transition],
    critic: &Mlp,
    gamma: f64,
) -> Result<Vec<AdvantageRecord>> {
    let Some(last) = transitions.last() else {
        return Ok(Vec::new());
    };
    let bootstrap = if last.done {
        0.0
    } else {
        critic.forward(&last.next_state)?[0]
    };
    Ok(discounted_targets(transitions, bootstrap, gamma))
}

pub(crate) fn discounted_targets(
    transitions: &[Transition],
    bootstrap: f64,
    gamma: f64,
) -> Vec<AdvantageRecord> {
    let mut out = vec![
        AdvantageRecord {
            v_target: 0.0,
            advantage: 0.0
        };
        transitions.len()
    ];
    let mut ret = bootstrap;
    for (t, tr) in transitions.iter().enumerate().rev() {
        if tr.done {
            ret = 0.0;
        }
        ret = tr.reward + gamma * ret;
        out[t] = AdvantageRecord {
            v_target: ret,
            advantage: ret - tr.value_old,
        };
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoHyperparams {
    pub gamma: f64,
    pub clip_epsilon: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub n_assim_per_episode: usize,
    pub learning_rate: f64,
    pub epochs_per_update: usize,
    pub minibatch_size: usize,
    pub n_workers: usize,
    pub total_episodes: usize,
    pub hidden_sizes: Vec<usize>,
    pub log_std_init: f64,
}

impl Default for PpoHyperparams {
    fn default() -> Self {
        Self {
            gamma: 0.9,
            clip_epsilon: 0.2,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            n_assim_per_episode: 1000,
            learning_rate: 1e-3,
            epochs_per_update: 10,
            minibatch_size: 64,
            n_workers: 8,
            total_episodes: 2000,
            hidden_sizes: vec![128, 128],
            log_std_init: 0.0,
        }
    }
}

impl PpoHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid("gamma", format!("must lie in [0, 1), got {}", self.gamma)));
        }
        let positive = [
            ("clip_epsilon", self.clip_epsilon),
            ("max_grad_norm", self.max_grad_norm),
            ("learning_rate", self.learning_rate),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        if !(self.value_coef.is_finite() && self.value_coef >= 0.0) {
            return Err(Error::invalid("value_coef", "must be non-negative"));
        }
        let counts = [
            ("n_assim_per_episode", self.n_assim_per_episode),
            ("epochs_per_update", self.epochs_per_update),
            ("minibatch_size", self.minibatch_size),
            ("n_workers", self.n_workers),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(name, "must be at least 1"));
            }
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::invalid("hidden_sizes", "widths must be positive"));
        }
        if !(LOG_STD_MIN..=LOG_STD_MAX).contains(&self.log_std_init) {
            return Err(Error::invalid("log_std_init", "must lie in [-5, 2]"));
        }
        Ok(())
    }

    pub fn n_updates(&self) -> usize {
        self.total_episodes.div_ceil(self.n_workers)
    }
}

/// Flattened training samples.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub state_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub log_probs_old: Vec<f64>,
    pub advantages: Vec<f64>,
    pub v_targets: Vec<f64>,
}

impl Batch {
    pub fn new(state_dim: usize) -> Self {
        Self {
            state_dim,
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.log_probs_old.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, tr: &Transition, rec: &AdvantageRecord) -> Result<()> {
        if tr.state.len() != self.state_dim {
            return Err(Error::dims("Batch::push state", self.state_dim, tr.state.len()));
        }
        self.states.extend_from_slice(&tr.state);
        self.actions.extend_from_slice(&tr.action);
        self.log_probs_old.push(tr.log_prob_old);
        self.advantages.push(rec.advantage);
        self.v_targets.push(rec.v_target);
        Ok(())
    }

    pub fn from_pairs(state_dim: usize, pairs: &[(Transition, AdvantageRecord)]) -> Result<Self> {
        let mut b = Self::new(state_dim);
        for (t, r) in pairs {
            b.push(t, r)?;
        }
        Ok(b)
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        let d = self.state_dim;
        let mut b = Batch::new(d);
        for &i in indices {
            b.states.extend_from_slice(&self.states[i * d..(i + 1) * d]);
            b.actions
                .extend_from_slice(&self.actions[i * ACTION_DIM..(i + 1) * ACTION_DIM]);
            b.log_probs_old.push(self.log_probs_old[i]);
            b.advantages.push(self.advantages[i]);
            b.v_targets.push(self.v_targets[i]);
        }
        b
    }
}

/// Zero-mean, unit-variance advantages (population statistics). Left centred only
/// when the batch has a single element or no spread.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    let n = adv.len() as f64;
    if adv.len() < 2 {
        return adv.to_vec();
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 0.0 {
        adv.iter().map(|a| (a - mean) / std).collect()
    } else {
        adv.iter().map(|a| a - mean).collect()
    }
}

/// `min(q A, clip(q, 1-eps, 1+eps) A)` and its derivative with respect to `log q`.
pub fn clipped_surrogate(q: f64, adv: f64, eps: f64) -> (f64, f64) {
    let unclipped = q * adv;
    let clipped = q.clamp(1.0 - eps, 1.0 + eps) * adv;
    let saturated = (adv > 0.0 && q > 1.0 + eps) || (adv < 0.0 && q < 1.0 - eps);
    if saturated {
        (clipped, 0.0)
    } else {
        (unclipped.min(clipped), unclipped)
    }
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub policy_grads: Gradients,
    pub log_std_grad: [f64; ACTION_DIM],
    pub critic_grads: Gradients,
    /// Probability ratios `q_t` for each sample.
    pub ratios: Vec<f64>,
}

/// Total PPO loss `-J_actor + v_f * L_critic` and its exact gradients.
pub fn ppo_loss(
    policy: &GaussianPolicy,
    critic: &Mlp,
    batch: &Batch,
    hp: &PpoHyperparams,
) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::invalid("batch", "PPO loss needs at least one sample"));
    }
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let adv = normalize_advantages(&batch.advantages);
    let std: Vec<f64> = policy.log_std.iter().map(|l| l.exp()).collect();

    let trace: Trace = policy.mean.forward_trace(&batch.states, n)?;
    let means = trace.output();
    let mut mean_grad = vec![0.0; n * ACTION_DIM];
    let mut log_std_grad = [0.0; ACTION_DIM];
    let mut actor_loss = 0.0;
    let mut ratios = Vec::with_capacity(n);
    for i in 0..n {
        let mu = &means[i * ACTION_DIM..(i + 1) * ACTION_DIM];
        let a = &batch.actions[i * ACTION_DIM..(i + 1) * ACTION_DIM];
        let lp = gaussian_log_prob(mu, &policy.log_std, a);
        let q = (lp - batch.log_probs_old[i]).exp();
        ratios.push(q);
        let (surr, d_surr_d_lp) = clipped_surrogate(q, adv[i], hp.clip_epsilon);
        actor_loss -= surr * inv_n;
        let d_loss_d_lp = -d_surr_d_lp * inv_n;
        if d_loss_d_lp != 0.0 {
            for j in 0..ACTION_DIM {
                let z = (a[j] - mu[j]) / std[j];
                mean_grad[i * ACTION_DIM + j] = d_loss_d_lp * z / std[j];
                log_std_grad[j] += d_loss_d_lp * (z * z - 1.0);
            }
        }
    }
    let mut policy_grads = policy.mean.zero_gradients();
    policy.mean.backward_trace(&trace, &mean_grad, &mut policy_grads)?;

    let ctrace = critic.forward_trace(&batch.states, n)?;
    let values = ctrace.output();
    let mut critic_loss = 0.0;
    let mut value_grad = vec![0.0; n];
    for i in 0..n {
        let err = batch.v_targets[i] - values[i];
        critic_loss += err * err * inv_n;
        value_grad[i] = -2.0 * err * inv_n * hp.value_coef;
    }
    let mut critic_grads = critic.zero_gradients();
    critic.backward_trace(&ctrace, &value_grad, &mut critic_grads)?;

    Ok(LossOutput {
        loss: actor_loss + hp.value_coef * critic_loss,
        actor_loss,
        critic_loss,
        policy_grads,
        log_std_grad,
        critic_grads,
        ratios,
    })
}

/// Result of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub observation: Vec<f64>,
    pub reward: f64,
    /// The episode is over.
    pub done: bool,
    /// The episode ended by failure; do not bootstrap past it.
    pub terminal: bool,
}

/// An episodic environment with a 3-component continuous action.
pub trait Environment: Send {
    fn observation_dim(&self) -> usize;
    /// Starts a new episode whose randomness is fully determined by `seed`.
    fn reset(&mut self, seed: u64) -> Result<Vec<f64>>;
    fn step(&mut self, action: &Action) -> Step;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLogRow {
    pub update_index: usize,
    pub mean_episode_reward: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub grad_norm_pre_clip: f64,
    pub log_std_mean: f64,
}

impl TrainLogRow {
    pub const CSV_HEADER: &'static str =
        "update_index,mean_episode_reward,actor_loss,critic_loss,grad_norm_pre_clip,log_std_mean";
}

/// Networks, optimiser moments and the position in the update schedule.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub policy: GaussianPolicy,
    pub critic: Mlp,
    actor_opt: AdamState,
    log_std_opt: AdamState,
    critic_opt: AdamState,
    pub next_update: usize,
}

impl TrainerState {
    /// Fresh networks for `input_dim`-dimensional agent states.
    pub fn init(input_dim: usize, hp: &PpoHyperparams, seed: u64) -> Result<Self> {
        let policy = GaussianPolicy::new(
            input_dim,
            &hp.hidden_sizes,
            hp.log_std_init,
            rng::derive_seed(seed, &[tag::INIT, 0]),
        )?;
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(&hp.hidden_sizes);
        sizes.push(1);
        let critic = Mlp::new(&sizes, rng::derive_seed(seed, &[tag::INIT, 1]))?;
        Self::resume(policy, critic, hp, 0)
    }

    /// Continues from existing networks with fresh optimiser moments.
    pub fn resume(
        policy: GaussianPolicy,
        critic: Mlp,
        hp: &PpoHyperparams,
        next_update: usize,
    ) -> Result<Self> {
        if critic.input_dim() != policy.mean.input_dim() || critic.output_dim() != 1 {
            return Err(Error::dims(
                "critic input",
                policy.mean.input_dim(),
                critic.input_dim(),
            ));
        }
        Ok(Self {
            actor_opt: AdamState::new(policy.mean.param_count(), hp.learning_rate),
            log_std_opt: AdamState::new(ACTION_DIM, hp.learning_rate),
            critic_opt: AdamState::new(critic.param_count(), hp.learning_rate),
            policy,
            critic,
            next_update,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: GaussianPolicy,
    pub critic: Mlp,
    pub log: Vec<TrainLogRow>,
}

/// Collects one episode per active worker in lockstep with a fixed policy snapshot.
/// Returns the per-worker transition segments.
pub fn collect_rollouts<E: Environment>(
    envs: &mut [E],
    policy: &GaussianPolicy,
    critic: &Mlp,
    seed: u64,
    update: usize,
) -> Result<Vec<Vec<Transition>>> {
    let n = envs.len();
    let dim = policy.mean.input_dim();
    let mut rngs: Vec<Rng> = (0..n)
        .map(|w| rng::stream(seed, &[tag::WORKER, w as u64, tag::UPDATE, update as u64, tag::RL]))
        .collect();
    let mut obs = envs
        .par_iter_mut()
        .enumerate()
        .map(|(w, env)| {
            env.reset(rng::derive_seed(
                seed,
                &[tag::WORKER, w as u64, tag::UPDATE, update as u64],
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    for o in &obs {
        if o.len() != dim {
            return Err(Error::dims("environment observation", dim, o.len()));
        }
    }
    let mut segments: Vec<Vec<Transition>> = vec![Vec::new(); n];
    let mut active: Vec<usize> = (0..n).collect();
    while !active.is_empty() {
        let inputs: Vec<f64> = active.iter().flat_map(|&w| obs[w].iter().copied()).collect();
        let means = policy.mean.forward_batch(&inputs, active.len())?;
        let values = critic.forward_batch(&inputs, active.len())?;
        let actions: Vec<(Action, f64)> = active
            .iter()
            .enumerate()
            .map(|(k, &w)| {
                sample_gaussian(
                    &means[k * ACTION_DIM..(k + 1) * ACTION_DIM],
                    &policy.log_std,
                    &mut rngs[w],
                )
            })
            .collect();
        let mut stepping: Vec<(usize, &mut E)> = envs
            .iter_mut()
            .enumerate()
            .filter(|(w, _)| active.contains(w))
            .collect();
        let steps: Vec<Step> = stepping
            .par_iter_mut()
            .zip(actions.par_iter())
            .map(|((_, env), (a, _))| env.step(a))
            .collect();
        let mut still = Vec::with_capacity(active.len());
        for (k, (&w, step)) in active.iter().zip(steps).enumerate() {
            let (action, log_prob) = actions[k];
            let next = step.observation;
            segments[w].push(Transition {
                state: std::mem::replace(&mut obs[w], next.clone()),
                action,
                reward: step.reward,
                next_state: next,
                log_prob_old: log_prob,
                value_old: values[k],
                done: step.terminal,
            });
            if !step.done {
                still.push(w);
            }
        }
        active = still;
    }
    Ok(segments)
}

/// Runs PPO updates until `hp.total_episodes` episodes have been collected.
///
/// `make_env(worker)` builds one environment per worker; each episode is reseeded
/// from `(seed, worker, update)`, so the result depends only on `seed` and `hp`.
pub fn train<E, F>(make_env: F, hp: &PpoHyperparams, seed: u64) -> Result<TrainOutcome>
where
    E: Environment,
    F: Fn(usize) -> Result<E>,
{
    hp.validate()?;
    let probe = make_env(0)?;
    let mut state = TrainerState::init(probe.observation_dim(), hp, seed)?;
    let log = train_from(&mut state, make_env, hp, seed, |_| {})?;
    Ok(TrainOutcome {
        policy: state.policy,
        critic: state.critic,
        log,
    })
}

/// Continues training `state` through the remaining updates, calling `on_update`
/// after each one.
pub fn train_from<E, F>(
    state: &mut TrainerState,
    make_env: F,
    hp: &PpoHyperparams,
    seed: u64,
    mut on_update: impl FnMut(&TrainLogRow),
) -> Result<Vec<TrainLogRow>>
where
    E: Environment,
    F: Fn(usize) -> Result<E>,
{
    hp.validate()?;
    let mut log = Vec::new();
    let mut envs: Vec<E> = Vec::new();
    for update in state.next_update..hp.n_updates() {
        let n_active = hp.n_workers.min(hp.total_episodes - update * hp.n_workers);
        while envs.len() < n_active {
            envs.push(make_env(envs.len())?);
        }
        let segments =
            collect_rollouts(&mut envs[..n_active], &state.policy, &state.critic, seed, update)?;
        let row = ppo_update(state, &segments, hp, seed, update)?;
        state.next_update = update + 1;
        on_update(&row);
        log.push(row);
    }
    Ok(log)
}

fn ppo_update(
    state: &mut TrainerState,
    segments: &[Vec<Transition>],
    hp: &PpoHyperparams,
    seed: u64,
    update: usize,
) -> Result<TrainLogRow> {
    let dim = state.policy.mean.input_dim();
    let mut buffer = Batch::new(dim);
    let mut episode_rewards = Vec::with_capacity(segments.len());
    for seg in segments {
        let recs = compute_returns_and_advantages(seg, &state.critic, hp.gamma)?;
        for (t, r) in seg.iter().zip(&recs) {
            buffer.push(t, r)?;
        }
        episode_rewards.push(seg.iter().map(|t| t.reward).sum::<f64>());
    }
    let mut shuffle = rng::stream(seed, &[tag::SHUFFLE, update as u64]);
    let mut indices: Vec<usize> = (0..buffer.len()).collect();
    let (mut actor_acc, mut critic_acc, mut norm_acc, mut count) = (0.0, 0.0, 0.0, 0usize);
    for _ in 0..hp.epochs_per_update {
        indices.shuffle(&mut shuffle);
        for chunk in indices.chunks(hp.minibatch_size) {
            let mb = buffer.select(chunk);
            let mut out = ppo_loss(&state.policy, &state.critic, &mb, hp)?;
            let norm = clip_joint(
                &mut [
                    &mut out.policy_grads.values,
                    &mut out.log_std_grad,
                    &mut out.critic_grads.values,
                ],
                hp.max_grad_norm,
            );
            adam_step(
                state.policy.mean.params_mut(),
                &out.policy_grads.values,
                &mut state.actor_opt,
            )?;
            adam_step(&mut state.policy.log_std, &out.log_std_grad, &mut state.log_std_opt)?;
            state.policy.clamp_log_std();
            adam_step(
                state.critic.params_mut(),
                &out.critic_grads.values,
                &mut state.critic_opt,
            )?;
            actor_acc += out.actor_loss;
            critic_acc += out.critic_loss;
            norm_acc += norm;
            count += 1;
        }
    }
    let c = count.max(1) as f64;
    Ok(TrainLogRow {
        update_index: update,
        mean_episode_reward: episode_rewards.iter().sum::<f64>() / episode_rewards.len().max(1) as f64,
        actor_loss: actor_acc / c,
        critic_loss: critic_acc / c,
        grad_norm_pre_clip: norm_acc / c,
        log_std_mean: state.policy.log_std.iter().sum::<f64>() / ACTION_DIM as f64,
    })
}
