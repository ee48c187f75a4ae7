//! Experiment orchestration: repeated twin runs of the RL corrector and the EnKF on
//! shared observations, ensemble-size sweeps, PDF exports and training.
//!
//! Every repetition `r` uses seed `base + r` for its twin and for each method, so
//! results do not depend on how repetitions are scheduled across threads.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::{ExperimentConfig, Method};
use crate::dynamics::StateVec;
use crate::enkf::run_enkf;
use crate::envda::{
    agent_state_dim, generate_twin, run_rl_assimilation, spun_up_state, AssimilationRun, DaEnv, RlMode,
    RunOptions, Twin,
};
use crate::error::{Error, Result};
use crate::neural::{Checkpoint, Mlp, Role};
use crate::ppo::{train_from, ActionModel, GaussianPolicy, TrainLogRow, TrainerState};

pub const HISTOGRAM_BINS: usize = 50;
pub const ACTOR_FILE: &str = "actor.ckpt";
pub const CRITIC_FILE: &str = "critic.ckpt";
pub const TRAINING_LOG: &str = "training_log.csv";

/// Round-trip exact float rendering (17 significant digits).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Mean and population standard deviation of the completed runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub completed: usize,
    pub divergences: usize,
}

impl Stat {
    pub fn from_runs(per_rep: &[Option<f64>]) -> Self {
        let done: Vec<f64> = per_rep.iter().flatten().copied().collect();
        let n = done.len() as f64;
        let (mean, std) = if done.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let m = done.iter().sum::<f64>() / n;
            (m, (done.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
        };
        Stat {
            mean,
            std,
            completed: done.len(),
            divergences: per_rep.len() - done.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub method: Method,
    /// Time-averaged RMSE of each repetition; `None` where the run diverged.
    pub per_rep: Vec<Option<f64>>,
    /// Per-step RMSE across completed repetitions.
    pub curve_mean: Vec<f64>,
    pub curve_std: Vec<f64>,
}

impl MethodSummary {
    pub fn stat(&self) -> Stat {
        Stat::from_runs(&self.per_rep)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub name: String,
    pub repetitions: usize,
    pub dt: f64,
    pub methods: Vec<MethodSummary>,
    pub budget_exceeded: bool,
}

impl ExperimentReport {
    pub fn method(&self, m: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }

    pub fn total_divergences(&self) -> usize {
        self.methods.iter().map(|m| m.stat().divergences).sum()
    }
}

/// Seed of repetition `r`.
pub fn repetition_seed(cfg: &ExperimentConfig, r: usize) -> u64 {
    cfg.seed.wrapping_add(r as u64)
}

/// Twin of repetition `r`; every method of that repetition sees exactly this one.
pub fn repetition_twin(cfg: &ExperimentConfig, r: usize) -> Result<Twin> {
    generate_twin(&cfg.twin_config(), repetition_seed(cfg, r))
}

/// Checks that RL methods have a policy of the right shape.
fn require_policy<'a>(
    cfg: &ExperimentConfig,
    methods: &[Method],
    policy: Option<&'a dyn ActionModel>,
) -> Result<Option<&'a dyn ActionModel>> {
    if !methods.iter().any(|m| m.uses_policy()) {
        return Ok(policy);
    }
    let p = policy.ok_or_else(|| {
        Error::Checkpoint("a trained policy is required for the RL methods".into())
    })?;
    let dim = agent_state_dim(cfg.steps_per_obs, &cfg.op());
    if p.input_dim() != dim {
        return Err(Error::dims("policy input", dim, p.input_dim()));
    }
    Ok(Some(p))
}

/// Runs one method; `Ok(None)` when the run diverges.
fn run_method(
    cfg: &ExperimentConfig,
    method: Method,
    size: usize,
    policy: Option<&dyn ActionModel>,
    twin: &Twin,
    seed: u64,
    opts: &RunOptions,
) -> Result<Option<AssimilationRun>> {
    let res = match method {
        Method::RlSingle | Method::RlEnsemble => {
            let mode = if method == Method::RlSingle {
                RlMode::Deterministic
            } else {
                RlMode::Ensemble(size)
            };
            let p = policy.expect("policy checked up front");
            run_rl_assimilation(p, &cfg.assimilation_setup(), twin, mode, seed, opts)
        }
        Method::Enkf => run_enkf(&cfg.enkf_setup(size), twin, seed, opts),
    };
    match res {
        Ok(run) => Ok(Some(run)),
        Err(Error::Divergence { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

fn default_size(cfg: &ExperimentConfig, m: Method) -> usize {
    match m {
        Method::RlSingle => 1,
        Method::RlEnsemble => cfg.rl_ensemble_size,
        Method::Enkf => cfg.enkf.ensemble_size,
    }
}

/// Runs every configured method over all repetitions. With `out`, writes
/// `<out>/<name>/{summary.csv, rmse_curves.csv, rep<k>/...}`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    policy: Option<&dyn ActionModel>,
    out: Option<&Path>,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let policy = require_policy(cfg, &cfg.methods, policy)?;
    let dir = out.map(|o| o.join(&cfg.name));
    if let Some(d) = &dir {
        fs::create_dir_all(d)?;
    }
    let per_rep: Vec<Vec<Option<Vec<f64>>>> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|r| -> Result<Vec<Option<Vec<f64>>>> {
            let twin = repetition_twin(cfg, r)?;
            let seed = repetition_seed(cfg, r);
            let runs = cfg
                .methods
                .iter()
                .map(|&m| run_method(cfg, m, default_size(cfg, m), policy, &twin, seed, &RunOptions::default()))
                .collect::<Result<Vec<_>>>()?;
            if let Some(d) = &dir {
                write_repetition(cfg, &d.join(format!("rep{r}")), &twin, &runs)?;
            }
            Ok(runs.into_iter().map(|o| o.map(|run| run.mean_rmse)).collect())
        })
        .collect::<Result<_>>()?;

    let methods: Vec<MethodSummary> = cfg
        .methods
        .iter()
        .enumerate()
        .map(|(j, &method)| {
            let curves: Vec<&Vec<f64>> = per_rep.iter().filter_map(|r| r[j].as_ref()).collect();
            let (curve_mean, curve_std) = curve_stats(&curves);
            MethodSummary {
                method,
                per_rep: per_rep
                    .iter()
                    .map(|r| r[j].as_ref().map(|c| c.iter().sum::<f64>() / c.len() as f64))
                    .collect(),
                curve_mean,
                curve_std,
            }
        })
        .collect();
    let mut report = ExperimentReport {
        name: cfg.name.clone(),
        repetitions: cfg.repetitions,
        dt: cfg.dt,
        methods,
        budget_exceeded: false,
    };
    report.budget_exceeded = report.total_divergences() > cfg.divergence_budget;
    if let Some(d) = &dir {
        write_summary(&d.join("summary.csv"), &report)?;
        write_curves(&d.join("rmse_curves.csv"), &report, cfg.export_stride)?;
    }
    Ok(report)
}

fn curve_stats(curves: &[&Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let Some(first) = curves.first() else {
        return (Vec::new(), Vec::new());
    };
    let n = curves.len() as f64;
    (0..first.len())
        .map(|t| {
            let m = curves.iter().map(|c| c[t]).sum::<f64>() / n;
            let v = curves.iter().map(|c| (c[t] - m).powi(2)).sum::<f64>() / n;
            (m, v.sqrt())
        })
        .unzip()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_repetition(
    cfg: &ExperimentConfig,
    dir: &Path,
    twin: &Twin,
    runs: &[Option<AssimilationRun>],
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = create(&dir.join("trajectory.csv"))?;
    writeln!(w, "time,x_ref,y_ref,z_ref,x_a,y_a,z_a,rmse,member_id")?;
    for (&m, run) in cfg.methods.iter().zip(runs) {
        let Some(run) = run else { continue };
        for t in (0..twin.reference.len()).step_by(cfg.export_stride) {
            let (r, a) = (twin.reference[t], run.mean_path[t]);
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                fmt_f64(t as f64 * cfg.dt),
                fmt_f64(r.x),
                fmt_f64(r.y),
                fmt_f64(r.z),
                fmt_f64(a.x),
                fmt_f64(a.y),
                fmt_f64(a.z),
                fmt_f64(run.mean_rmse[t]),
                m.label()
            )?;
        }
    }
    w.flush()?;

    write_observations(&dir.join("observations.csv"), cfg, twin)?;

    let mut w = create(&dir.join("metrics.csv"))?;
    writeln!(w, "method,time_averaged_rmse,diverged")?;
    for (&m, run) in cfg.methods.iter().zip(runs) {
        match run {
            Some(run) => writeln!(w, "{},{},0", m.label(), fmt_f64(run.time_averaged_rmse()))?,
            None => writeln!(w, "{},,1", m.label())?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_observations(path: &Path, cfg: &ExperimentConfig, twin: &Twin) -> Result<()> {
    let op = cfg.op();
    let mut w = create(path)?;
    let cols: Vec<String> = op.indices().map(|i| format!("obs_{}", ["x", "y", "z"][i])).collect();
    writeln!(w, "time,{},mask", cols.join(","))?;
    let t_obs = cfg.dt * cfg.steps_per_obs as f64;
    for (k, y) in twin.observations.iter().enumerate() {
        let vals: Vec<String> = y.iter().map(|&v| fmt_f64(v)).collect();
        writeln!(w, "{},{},{}", fmt_f64(k as f64 * t_obs), vals.join(","), op.label())?;
    }
    w.flush()?;
    Ok(())
}

fn write_summary(path: &Path, report: &ExperimentReport) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "method,time_averaged_rmse_mean,time_averaged_rmse_std,completed,divergences,repetitions")?;
    for m in &report.methods {
        let s = m.stat();
        writeln!(
            w,
            "{},{},{},{},{},{}",
            m.method.label(),
            fmt_f64(s.mean),
            fmt_f64(s.std),
            s.completed,
            s.divergences,
            report.repetitions
        )?;
    }
    w.flush()?;
    Ok(())
}

fn write_curves(path: &Path, report: &ExperimentReport, stride: usize) -> Result<()> {
    let mut w = create(path)?;
    let mut header = vec!["time".to_string()];
    for m in &report.methods {
        header.push(format!("{}_mean", m.method.label()));
        header.push(format!("{}_std", m.method.label()));
    }
    writeln!(w, "{}", header.join(","))?;
    let len = report.methods.iter().map(|m| m.curve_mean.len()).max().unwrap_or(0);
    for t in (0..len).step_by(stride) {
        let mut row = vec![fmt_f64(t as f64 * report.dt)];
        for m in &report.methods {
            // a method that diverged everywhere has no curve
            row.push(m.curve_mean.get(t).map_or(String::new(), |&v| fmt_f64(v)));
            row.push(m.curve_std.get(t).map_or(String::new(), |&v| fmt_f64(v)));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub size: usize,
    /// RL Monte-Carlo ensemble of `size` members.
    pub rl: Option<Stat>,
    /// EnKF with `size` members; absent below two members.
    pub enkf: Option<Stat>,
}

/// Time-averaged RMSE against ensemble size for the RL Monte-Carlo ensemble and the
/// EnKF, over all repetitions. Methods follow `cfg.methods`; writes `<out>/<name>/sweep.csv`.
pub fn ensemble_size_sweep(
    cfg: &ExperimentConfig,
    policy: Option<&dyn ActionModel>,
    sizes: &[usize],
    out: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::invalid("sizes", "give at least one positive ensemble size"));
    }
    let with_rl = cfg.methods.contains(&Method::RlEnsemble);
    let with_enkf = cfg.methods.contains(&Method::Enkf);
    let policy = require_policy(cfg, if with_rl { &[Method::RlEnsemble] } else { &[] }, policy)?;
    let column = |m: Method, n: usize| -> Result<Stat> {
        let per_rep = (0..cfg.repetitions)
            .into_par_iter()
            .map(|r| {
                let twin = repetition_twin(cfg, r)?;
                let run = run_method(cfg, m, n, policy, &twin, repetition_seed(cfg, r), &RunOptions::default())?;
                Ok(run.map(|run| run.time_averaged_rmse()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Stat::from_runs(&per_rep))
    };
    let mut rows = Vec::with_capacity(sizes.len());
    for &n in sizes {
        rows.push(SweepRow {
            size: n,
            rl: if with_rl { Some(column(Method::RlEnsemble, n)?) } else { None },
            enkf: if with_enkf && n >= 2 { Some(column(Method::Enkf, n)?) } else { None },
        });
    }
    if let Some(o) = out {
        let dir = o.join(&cfg.name);
        fs::create_dir_all(&dir)?;
        let mut w = create(&dir.join("sweep.csv"))?;
        writeln!(w, "size,rl_mean,rl_std,rl_divergences,enkf_mean,enkf_std,enkf_divergences")?;
        let cells = |s: &Option<Stat>| match s {
            Some(s) => format!("{},{},{}", fmt_f64(s.mean), fmt_f64(s.std), s.divergences),
            None => ",,".into(),
        };
        for r in &rows {
            writeln!(w, "{},{},{}", r.size, cells(&r.rl), cells(&r.enkf))?;
        }
        w.flush()?;
    }
    Ok(rows)
}

/// Fixed-width histogram; `edges` has one more entry than `counts`.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// `bins` equal bins over `[lo, hi]`; a degenerate range is widened by 0.5 each side.
    pub fn new(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
        let mut counts = vec![0; bins];
        for &v in samples {
            let i = ((v - lo) / width).floor();
            counts[(i.max(0.0) as usize).min(bins - 1)] += 1;
        }
        Histogram { edges, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelHistogram {
    /// `forecast_z`, `analysis_z` or `correction_z`.
    pub panel: &'static str,
    pub method: Method,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistogramReport {
    pub time: f64,
    pub obs_index: usize,
    pub panels: Vec<PanelHistogram>,
    /// Sample standard deviation of the z-correction, per method.
    pub correction_std: Vec<(Method, f64)>,
}

impl HistogramReport {
    pub fn correction_std(&self, m: Method) -> Option<f64> {
        self.correction_std.iter().find(|(k, _)| *k == m).map(|(_, s)| *s)
    }
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Distributions of the z-component before and after the correction, and of the
/// correction itself, at observation time `time` of the first repetition. Covers the
/// RL Monte-Carlo ensemble and the EnKF, as configured; bins span the pooled range.
/// Writes `<out>/<name>/histograms_t<time>.csv`.
pub fn export_pdf_histograms(
    cfg: &ExperimentConfig,
    policy: Option<&dyn ActionModel>,
    time: f64,
    out: Option<&Path>,
) -> Result<HistogramReport> {
    cfg.validate()?;
    let k = cfg.observation_index(time)?;
    let methods: Vec<Method> = cfg.methods.iter().copied().filter(|&m| m != Method::RlSingle).collect();
    if methods.is_empty() {
        return Err(Error::invalid("methods", "histograms need rl-ensemble or enkf"));
    }
    let policy = require_policy(cfg, &methods, policy)?;
    let twin = repetition_twin(cfg, 0)?;
    let opts = RunOptions {
        snapshot_at: Some(k),
        keep_member_paths: false,
    };
    let mut samples: Vec<(Method, [Vec<f64>; 3])> = Vec::new();
    for &m in &methods {
        let run = run_method(cfg, m, default_size(cfg, m), policy, &twin, repetition_seed(cfg, 0), &opts)?
            .ok_or(Error::Divergence {
                step: k * cfg.steps_per_obs,
                threshold: crate::dynamics::DIVERGENCE_THRESHOLD,
            })?;
        let snap = run.snapshot.expect("snapshot requested");
        let z = |v: &[StateVec]| v.iter().map(|s| s.z).collect::<Vec<_>>();
        samples.push((m, [z(&snap.forecast), z(&snap.analysis), z(&snap.corrections())]));
    }
    let names = ["forecast_z", "analysis_z", "correction_z"];
    let mut panels = Vec::new();
    for (p, &panel) in names.iter().enumerate() {
        let pooled = samples.iter().flat_map(|(_, s)| s[p].iter().copied());
        let (lo, hi) = pooled.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        for (m, s) in &samples {
            panels.push(PanelHistogram {
                panel,
                method: *m,
                histogram: Histogram::new(&s[p], lo, hi, HISTOGRAM_BINS),
            });
        }
    }
    let report = HistogramReport {
        time,
        obs_index: k,
        panels,
        correction_std: samples.iter().map(|(m, s)| (*m, sample_std(&s[2]))).collect(),
    };
    if let Some(o) = out {
        let dir = o.join(&cfg.name);
        fs::create_dir_all(&dir)?;
        let mut w = create(&dir.join(format!("histograms_t{time}.csv")))?;
        writeln!(w, "panel,method,bin,lower,upper,count")?;
        for ph in &report.panels {
            let h = &ph.histogram;
            for (i, c) in h.counts.iter().enumerate() {
                writeln!(
                    w,
                    "{},{},{i},{},{},{c}",
                    ph.panel,
                    ph.method.label(),
                    fmt_f64(h.edges[i]),
                    fmt_f64(h.edges[i + 1])
                )?;
            }
        }
        w.flush()?;
    }
    Ok(report)
}

/// Free-running reference trajectory with derivatives, `n_steps` model steps from a
/// spun-up start drawn from `cfg.seed`. Writes `time,x,y,z,dx,dy,dz` to `path`.
pub fn simulate_reference(cfg: &ExperimentConfig, n_steps: usize, path: &Path) -> Result<()> {
    cfg.validate()?;
    let grid = cfg.grid();
    let mut rng = crate::rng::stream(cfg.seed, &[crate::rng::tag::TWIN]);
    let start = spun_up_state(&cfg.lorenz, grid.dt, &mut rng)?;
    let path_states = crate::dynamics::integrate(start, &cfg.lorenz, &grid, n_steps)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = create(path)?;
    writeln!(w, "time,x,y,z,dx,dy,dz")?;
    for (t, (s, d)) in path_states.iter().enumerate() {
        let cols = [t as f64 * grid.dt, s.x, s.y, s.z, d.x, d.y, d.z].map(fmt_f64);
        writeln!(w, "{}", cols.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Loads an actor checkpoint and checks it against the experiment's agent state.
pub fn load_policy(cfg: &ExperimentConfig, path: &Path) -> Result<GaussianPolicy> {
    let ck = Checkpoint::load(path)?;
    let policy = GaussianPolicy::from_checkpoint(&ck)?;
    let dim = agent_state_dim(cfg.steps_per_obs, &cfg.op());
    if policy.mean.input_dim() != dim {
        return Err(Error::Checkpoint(format!(
            "{} expects {}-dimensional agent states, the experiment has {dim}",
            path.display(),
            policy.mean.input_dim()
        )));
    }
    if ck.input_scales != cfg.features.to_vec() {
        return Err(Error::Checkpoint(format!(
            "{} was trained with feature scales {:?}",
            path.display(),
            ck.input_scales
        )));
    }
    Ok(policy)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub actor: PathBuf,
    pub critic: PathBuf,
    pub log: PathBuf,
    /// Rows produced by this invocation.
    pub rows: Vec<TrainLogRow>,
    pub next_update: usize,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Saves both networks; the critic carries the index of the next update so a
/// resumed run knows where the schedule stands.
fn save_state(out: &Path, cfg: &ExperimentConfig, state: &TrainerState) -> Result<()> {
    let scales = cfg.features.to_vec();
    write_atomic(&out.join(ACTOR_FILE), &state.policy.to_checkpoint(&scales).to_bytes())?;
    let critic = Checkpoint {
        role: Role::Critic,
        net: state.critic.clone(),
        input_scales: scales,
        extra: vec![state.next_update as f64],
    };
    write_atomic(&out.join(CRITIC_FILE), &critic.to_bytes())
}

fn load_state(out: &Path, cfg: &ExperimentConfig) -> Result<(GaussianPolicy, Mlp, usize)> {
    let policy = load_policy(cfg, &out.join(ACTOR_FILE))?;
    let ck = Checkpoint::load(out.join(CRITIC_FILE))?;
    if ck.role != Role::Critic {
        return Err(Error::Checkpoint(format!("{CRITIC_FILE} is not a critic checkpoint")));
    }
    let next = match ck.extra.as_slice() {
        [n] if *n >= 0.0 && n.fract() == 0.0 => *n as usize,
        _ => return Err(Error::Checkpoint(format!("{CRITIC_FILE} lacks the update index"))),
    };
    Ok((policy, ck.net, next))
}

/// Keeps the log rows of updates before `next_update`, so that an interrupted run
/// resumes without gaps or duplicates.
fn trim_log(path: &Path, next_update: usize) -> Result<()> {
    let mut kept = vec![TrainLogRow::CSV_HEADER.to_string()];
    if path.exists() {
        for line in BufReader::new(File::open(path)?).lines().skip(1) {
            let line = line?;
            let idx = line.split(',').next().and_then(|s| s.parse::<usize>().ok());
            if idx.is_some_and(|i| i < next_update) {
                kept.push(line);
            }
        }
    }
    let mut body = kept.join("\n");
    body.push('\n');
    write_atomic(path, body.as_bytes())
}

pub fn format_log_row(r: &TrainLogRow) -> String {
    format!(
        "{},{},{},{},{},{}",
        r.update_index,
        fmt_f64(r.mean_episode_reward),
        fmt_f64(r.actor_loss),
        fmt_f64(r.critic_loss),
        fmt_f64(r.grad_norm_pre_clip),
        fmt_f64(r.log_std_mean)
    )
}

/// Trains the corrector for `cfg` into `out` (`actor.ckpt`, `critic.ckpt`,
/// `training_log.csv`). Checkpoints are refreshed after every update. With
/// `resume`, continues from the checkpoints already in `out`.
pub fn train_experiment(
    cfg: &ExperimentConfig,
    out: &Path,
    resume: bool,
    mut on_update: impl FnMut(&TrainLogRow),
) -> Result<TrainReport> {
    cfg.validate()?;
    let hp = cfg.hyperparams()?;
    fs::create_dir_all(out)?;
    let log_path = out.join(TRAINING_LOG);
    let mut state = if resume {
        let (policy, critic, next) = load_state(out, cfg)?;
        TrainerState::resume(policy, critic, &hp, next)?
    } else {
        TrainerState::init(agent_state_dim(cfg.steps_per_obs, &cfg.op()), &hp, cfg.seed)?
    };
    trim_log(&log_path, state.next_update)?;
    save_state(out, cfg, &state)?;

    let twin_cfg = cfg.twin_config();
    let make_env = |_| DaEnv::new(twin_cfg.clone(), cfg.features, hp.n_assim_per_episode);
    let mut log = OpenOptions::new().append(true).open(&log_path)?;
    let mut rows = Vec::new();
    // one update per call, so checkpoints never lag the log; episode seeds depend
    // only on (seed, worker, update), so the split does not change the result
    while state.next_update < hp.n_updates() {
        let mut step_hp = hp.clone();
        step_hp.total_episodes = hp.total_episodes.min((state.next_update + 1) * hp.n_workers);
        for row in train_from(&mut state, make_env, &step_hp, cfg.seed, |_| {})? {
            writeln!(log, "{}", format_log_row(&row))?;
            on_update(&row);
            rows.push(row);
        }
        save_state(out, cfg, &state)?;
    }
    Ok(TrainReport {
        actor: out.join(ACTOR_FILE),
        critic: out.join(CRITIC_FILE),
        log: log_path,
        rows,
        next_update: state.next_update,
    })
}
