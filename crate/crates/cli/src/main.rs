use std::path::PathBuf;
use std::process::ExitCode;

use chaos_da::config::{ExperimentConfig, Method};
use chaos_da::harness::{self, ExperimentReport, Stat};
use chaos_da::ppo::GaussianPolicy;
use chaos_da::Error;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "chaos-da", version, about = "Learned data assimilation for Lorenz '63 against an ensemble Kalman filter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Output root; results go to <out>/<experiment name>/
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Override the configured base seed
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on it)
    #[arg(long, env = "CHAOS_DA_WORKERS")]
    workers: Option<usize>,
    /// Only report errors
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct Policy {
    /// Directory holding actor.ckpt (defaults to the training output <out>/<name>/)
    #[arg(long)]
    checkpoints: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Free-run a spun-up reference trajectory with derivatives
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Model steps (default: the configured horizon)
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the corrector with PPO
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoints in the output directory
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate the trained corrector (single and Monte-Carlo ensemble)
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: Policy,
    },
    /// Run every configured method on shared twins
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: Policy,
    },
    /// Time-averaged RMSE against ensemble size
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: Policy,
        /// Comma-separated ensemble sizes (default: the configured sweep_sizes)
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
    /// Forecast, analysis and correction histograms at one observation time
    Histograms {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: Policy,
        /// Observation time (default: the configured histogram_time)
        #[arg(long)]
        time: Option<f64>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Simulate { common, .. }
            | Command::Train { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Compare { common, .. }
            | Command::Sweep { common, .. }
            | Command::Histograms { common, .. } => common,
        }
    }
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
    extra: serde_json::Value,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let (code, kind, extra) = match &e {
            Error::Config(ce) => (EXIT_CONFIG, "config", json!({ "field": ce.field, "line": ce.line })),
            Error::UnknownHyperparams(_) => (EXIT_CONFIG, "config", json!({ "field": "ppo" })),
            Error::InvalidParameter { name, .. } => (EXIT_CONFIG, "invalid_parameter", json!({ "field": name })),
            Error::NotObservationTime { requested, below, above } => (
                EXIT_CONFIG,
                "not_observation_time",
                json!({ "requested": requested, "nearest": [below, above] }),
            ),
            Error::Divergence { step, .. } => (EXIT_DIVERGENCE, "divergence", json!({ "step": step })),
            Error::Checkpoint(_) => (EXIT_RUNTIME, "checkpoint", json!({})),
            Error::Io(_) => (EXIT_RUNTIME, "io", json!({})),
            _ => (EXIT_RUNTIME, "runtime", json!({})),
        };
        Failure {
            code,
            kind,
            message: e.to_string(),
            extra,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let mut line = json!({ "error": f.kind, "message": f.message });
            if let (Some(obj), Some(extra)) = (line.as_object_mut(), f.extra.as_object()) {
                obj.extend(extra.clone());
            }
            eprintln!("{line}");
            ExitCode::from(f.code)
        }
    }
}

fn load_config(c: &Common) -> Result<ExperimentConfig, Failure> {
    let src = std::fs::read_to_string(&c.config).map_err(|e| Failure {
        code: EXIT_CONFIG,
        kind: "config",
        message: format!("cannot read {}: {e}", c.config.display()),
        extra: json!({ "path": c.config }),
    })?;
    let mut cfg = ExperimentConfig::from_toml(&src)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn set_workers(n: Option<usize>) -> Result<(), Failure> {
    let Some(n) = n else { return Ok(()) };
    if n == 0 {
        return Err(Error::InvalidParameter {
            name: "workers",
            reason: "must be at least 1".into(),
        }
        .into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure {
            code: EXIT_RUNTIME,
            kind: "runtime",
            message: e.to_string(),
            extra: json!({}),
        })
}

fn load_policy(cfg: &ExperimentConfig, c: &Common, p: &Policy) -> Result<Option<GaussianPolicy>, Failure> {
    if !cfg.methods.iter().any(|m| m.uses_policy()) {
        return Ok(None);
    }
    let dir = p.checkpoints.clone().unwrap_or_else(|| c.out.join(&cfg.name));
    let path = dir.join(harness::ACTOR_FILE);
    if !path.exists() {
        return Err(Error::Checkpoint(format!("no actor checkpoint at {}; run `train` first", path.display())).into());
    }
    Ok(Some(harness::load_policy(cfg, &path)?))
}

fn run(cmd: &Command) -> Result<(), Failure> {
    let common = cmd.common();
    // validate everything before touching the output directory
    let mut cfg = load_config(common)?;
    set_workers(common.workers)?;
    let say = |s: String| {
        if !common.quiet {
            println!("{s}");
        }
    };
    let dir = common.out.join(&cfg.name);
    match cmd {
        Command::Simulate { steps, .. } => {
            let n = steps.unwrap_or_else(|| cfg.twin_config().n_steps());
            let path = dir.join("reference.csv");
            harness::simulate_reference(&cfg, n, &path)?;
            say(format!("wrote {} ({} steps)", path.display(), n));
        }
        Command::Train { resume, .. } => {
            let hp = cfg.hyperparams()?;
            let total = hp.n_updates();
            let rep = harness::train_experiment(&cfg, &dir, *resume, |row| {
                if !common.quiet {
                    eprintln!(
                        "update {}/{total}  reward {:.4}  log_std {:.3}",
                        row.update_index + 1,
                        row.mean_episode_reward,
                        row.log_std_mean
                    );
                }
            })?;
            say(format!("checkpoints in {} after {} updates", dir.display(), rep.next_update));
        }
        Command::Evaluate { policy, .. } | Command::Compare { policy, .. } => {
            if matches!(cmd, Command::Evaluate { .. }) {
                cfg.methods.retain(|m| m.uses_policy());
                if cfg.methods.is_empty() {
                    cfg.methods = vec![Method::RlSingle, Method::RlEnsemble];
                }
            }
            let p = load_policy(&cfg, common, policy)?;
            let report = harness::run_experiment(&cfg, p.as_ref().map(|p| p as _), Some(&common.out))?;
            say(summary_table(&report));
            check_budget(&cfg, report.total_divergences())?;
        }
        Command::Sweep { policy, sizes, .. } => {
            let sizes = sizes.clone().unwrap_or_else(|| cfg.sweep_sizes.clone());
            let p = load_policy(&cfg, common, policy)?;
            let rows = harness::ensemble_size_sweep(&cfg, p.as_ref().map(|p| p as _), &sizes, Some(&common.out))?;
            let cell = |s: &Option<Stat>| s.map_or("-".to_string(), |s| format!("{:.4} ± {:.4}", s.mean, s.std));
            let mut lines = vec![format!("{:>6}  {:>20}  {:>20}", "size", "rl-ensemble", "enkf")];
            let mut divergences = 0;
            for r in &rows {
                lines.push(format!("{:>6}  {:>20}  {:>20}", r.size, cell(&r.rl), cell(&r.enkf)));
                divergences += [r.rl, r.enkf].iter().flatten().map(|s| s.divergences).sum::<usize>();
            }
            say(lines.join("\n"));
            check_budget(&cfg, divergences)?;
        }
        Command::Histograms { policy, time, .. } => {
            let t = time.or(cfg.histogram_time).ok_or_else(|| {
                Failure::from(Error::InvalidParameter {
                    name: "time",
                    reason: "pass --time or set histogram_time in the config".into(),
                })
            })?;
            let p = load_policy(&cfg, common, policy)?;
            let rep = harness::export_pdf_histograms(&cfg, p.as_ref().map(|p| p as _), t, Some(&common.out))?;
            for (m, s) in &rep.correction_std {
                say(format!("{:<12} correction std (z) {s:.6}", m.label()));
            }
        }
    }
    Ok(())
}

fn check_budget(cfg: &ExperimentConfig, divergences: usize) -> Result<(), Failure> {
    if divergences > cfg.divergence_budget {
        return Err(Failure {
            code: EXIT_DIVERGENCE,
            kind: "divergence_budget",
            message: format!("{divergences} runs diverged; the budget is {}", cfg.divergence_budget),
            extra: json!({ "divergences": divergences, "budget": cfg.divergence_budget }),
        });
    }
    Ok(())
}

fn summary_table(r: &ExperimentReport) -> String {
    let mut lines = vec![format!("{:<12} {:>12} {:>12} {:>10}", "method", "rmse mean", "rmse std", "diverged")];
    for m in &r.methods {
        let s = m.stat();
        lines.push(format!("{:<12} {:>12.6} {:>12.6} {:>10}", m.method.label(), s.mean, s.std, s.divergences));
    }
    lines.join("\n")
}
