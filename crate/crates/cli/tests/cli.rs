use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chaos_da::config::ExperimentConfig;
use chaos_da::harness::ACTOR_FILE;
use chaos_da::ppo::GaussianPolicy;

const SMALL: &str = r#"
name = "small"
seed = 5
steps_per_obs = 50
horizon = 2.5
repetitions = 1
rl_ensemble_size = 5
sweep_sizes = [2, 5]
histogram_time = 1.5

[noise]
kind = "gaussian"
std = 1.0

[ppo]
total_episodes = 4
n_workers = 2
n_assim_per_episode = 4
hidden_sizes = [8]
epochs_per_update = 2
minibatch_size = 4

[enkf]
ensemble_size = 8
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_chaos-da"));
    c.env_remove("CHAOS_DA_WORKERS");
    c
}

fn write_config(dir: &Path, src: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    fs::write(&p, src).unwrap();
    p
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    bin()
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .output()
        .unwrap()
}

fn error_line(o: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(err.lines().last().expect("an error line")).unwrap()
}

fn data_rows(p: &Path) -> usize {
    fs::read_to_string(p).unwrap().lines().count() - 1
}

#[test]
fn simulate_writes_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = run(&["simulate", "--steps", "1000"], &cfg, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = dir.path().join("small/reference.csv");
    assert_eq!(data_rows(&csv), 1001);
    let text = fs::read_to_string(csv).unwrap();
    assert!(text.starts_with("time,x,y,z,dx,dy,dz\n") && text.ends_with('\n'));
}

#[test]
fn untrained_checkpoints_from_zero_episodes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("total_episodes = 4", "total_episodes = 0"));
    let o = run(&["train"], &cfg, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let parsed = ExperimentConfig::load(&cfg).unwrap();
    let p = chaos_da::harness::load_policy(&parsed, &dir.path().join("small").join(ACTOR_FILE)).unwrap();
    assert_eq!(p.mean.layer_sizes(), &[309, 8, 3]);
    assert_eq!(data_rows(&dir.path().join("small/training_log.csv")), 0);
}

#[test]
fn resume_continues_the_update_index() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    assert!(run(&["train"], &cfg, dir.path()).status.success());
    let longer = write_config(dir.path(), &SMALL.replace("total_episodes = 4", "total_episodes = 8"));
    let o = run(&["train", "--resume"], &longer, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(dir.path().join("small/training_log.csv")).unwrap();
    let idx: Vec<&str> = log.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(idx, ["0", "1", "2", "3"]);
}

#[test]
fn compare_sweep_and_histograms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    assert!(run(&["train"], &cfg, dir.path()).status.success());

    let o = run(&["compare"], &cfg, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(dir.path().join("small/summary.csv")).unwrap();
    let methods: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["rl-single", "rl-ensemble", "enkf"]);

    let o = run(&["sweep", "--sizes", "2,50"], &cfg, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(data_rows(&dir.path().join("small/sweep.csv")), 2);

    let o = run(&["histograms"], &cfg, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(data_rows(&dir.path().join("small/histograms_t1.5.csv")), 300);

    let o = run(&["evaluate"], &cfg, dir.path());
    assert!(o.status.success());
    let summary = fs::read_to_string(dir.path().join("small/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn non_observation_time_names_neighbours() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    assert!(run(&["train"], &cfg, dir.path()).status.success());
    let o = run(&["histograms", "--time", "1.52"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(2));
    let e = error_line(&o);
    assert_eq!(e["error"], "not_observation_time");
    assert_eq!(e["nearest"], serde_json::json!([1.5, 1.55]));
    assert!(e["message"].as_str().unwrap().contains("1.5 and 1.55"));
}

#[test]
fn config_errors_exit_two_and_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("steps_per_obs = 50", "steps_per_obs = 7"));
    let o = run(&["compare"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(2));
    let e = error_line(&o);
    assert_eq!(e["field"], "steps_per_obs");
    assert_eq!(e["line"], 4);
    // nothing written on a validation failure
    assert!(!dir.path().join("small").exists());

    let o = run(&["compare"], &dir.path().join("missing.toml"), dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoints_are_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = run(&["compare"], &cfg, dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(error_line(&o)["error"], "checkpoint");
}

#[test]
fn exceeding_the_divergence_budget_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let parsed = ExperimentConfig::load(&cfg).unwrap();
    let mut p = GaussianPolicy::new(309, &[8], 0.0, 1).unwrap();
    let last = p.mean.n_layers() - 1;
    p.mean.layer_mut(last).1.fill(1e7);
    let ck_dir = dir.path().join("ck");
    fs::create_dir_all(&ck_dir).unwrap();
    p.to_checkpoint(&parsed.features.to_vec()).save(ck_dir.join(ACTOR_FILE)).unwrap();
    let o = bin()
        .args(["compare", "--quiet", "--checkpoints"])
        .arg(&ck_dir)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(error_line(&o)["divergences"], 2);
    // the artifacts are still written
    assert!(dir.path().join("small/summary.csv").exists());
}

#[test]
fn worker_count_zero_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let o = bin()
        .args(["simulate", "--workers", "0", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin()
        .args(["simulate", "--quiet", "--steps", "10", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .env("CHAOS_DA_WORKERS", "2")
        .output()
        .unwrap();
    assert!(o.status.success());
}
