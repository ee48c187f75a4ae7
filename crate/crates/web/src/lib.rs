//! wasm-bindgen exports backing `www/index.html`. Every result is a flat
//! `Float64Array` so the page can draw it without parsing.

use chaos_da::dynamics::{self, LorenzParams, StateVec, TimeGrid};
use chaos_da::enkf::{self, EnkfConfig, EnkfSetup};
use chaos_da::envda::{self, NoiseModel, ObservationOperator, RunOptions, TwinConfig};
use wasm_bindgen::prelude::*;

/// Columns per row of [`enkf_twin`]'s output.
pub const TWIN_COLUMNS: usize = 8;

fn js_err(e: chaos_da::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn params() -> LorenzParams {
    LorenzParams::default()
}

fn grid(dt: f64) -> Result<TimeGrid, JsError> {
    TimeGrid::new(dt, 1).map_err(js_err)
}

fn stride_of(stride: usize) -> usize {
    stride.max(1)
}

/// `[x, y, z]` per kept step, starting from `(x, y, z)`.
#[wasm_bindgen]
pub fn simulate(x: f64, y: f64, z: f64, dt: f64, steps: usize, stride: usize) -> Result<Vec<f64>, JsError> {
    let path = dynamics::integrate(StateVec::new(x, y, z), &params(), &grid(dt)?, steps).map_err(js_err)?;
    Ok(path
        .iter()
        .step_by(stride_of(stride))
        .flat_map(|(s, _)| [s.x, s.y, s.z])
        .collect())
}

/// Euclidean distance between the trajectory from `(x, y, z)` and one whose `x`
/// starts `eps` away, per kept step.
#[wasm_bindgen]
pub fn separation(x: f64, y: f64, z: f64, eps: f64, dt: f64, steps: usize, stride: usize) -> Result<Vec<f64>, JsError> {
    let (p, g) = (params(), grid(dt)?);
    let a = dynamics::integrate(StateVec::new(x, y, z), &p, &g, steps).map_err(js_err)?;
    let b = dynamics::integrate(StateVec::new(x + eps, y, z), &p, &g, steps).map_err(js_err)?;
    Ok(a.iter()
        .zip(&b)
        .step_by(stride_of(stride))
        .map(|((u, _), (v, _))| {
            let d = *u - *v;
            (d.x * d.x + d.y * d.y + d.z * d.z).sqrt()
        })
        .collect())
}

/// Twin experiment assimilated by a stochastic EnKF. Rows of
/// `[time, x_ref, y_ref, z_ref, x_a, y_a, z_a, rmse]` every `stride` steps.
#[wasm_bindgen]
pub fn enkf_twin(
    seed: u64,
    noise_std: f64,
    steps_per_obs: usize,
    ensemble_size: usize,
    horizon: f64,
    stride: usize,
) -> Result<Vec<f64>, JsError> {
    let g = TimeGrid::new(dynamics::DEFAULT_DT, steps_per_obs).map_err(js_err)?;
    let op = ObservationOperator::full();
    let noise = NoiseModel::Gaussian { std: noise_std };
    let twin_cfg = TwinConfig {
        params: params(),
        grid: g,
        op,
        noise,
        n_intervals: TwinConfig::intervals_for(&g, horizon),
    };
    let twin = envda::generate_twin(&twin_cfg, seed).map_err(js_err)?;
    let setup = EnkfSetup {
        params: params(),
        grid: g,
        op,
        cfg: EnkfConfig {
            ensemble_size,
            ..EnkfConfig::default()
        },
        obs_error_std: noise_std,
    };
    let run = enkf::run_enkf(&setup, &twin, seed, &RunOptions::default()).map_err(js_err)?;
    let mut out = Vec::with_capacity(twin.reference.len() / stride_of(stride) * TWIN_COLUMNS + TWIN_COLUMNS);
    for i in (0..twin.reference.len()).step_by(stride_of(stride)) {
        let (r, a) = (twin.reference[i], run.mean_path[i]);
        out.extend([i as f64 * g.dt, r.x, r.y, r.z, a.x, a.y, a.z, run.mean_rmse[i]]);
    }
    Ok(out)
}
