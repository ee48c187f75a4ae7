//! Lorenz '63 vector field and fixed-step second-order Runge-Kutta integration.

use std::ops::{Add, AddAssign, Index, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Any state component above this magnitude is treated as a blow-up.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

/// Default model time step.
pub const DEFAULT_DT: f64 = 0.001;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LorenzParams {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
        }
    }
}

impl LorenzParams {
    pub fn new(sigma: f64, rho: f64, beta: f64) -> Result<Self> {
        let p = Self { sigma, rho, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma", self.sigma), ("rho", self.rho), ("beta", self.beta)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        Ok(())
    }

    /// The three equilibria: the origin and the two wing centres (when rho > 1).
    pub fn fixed_points(&self) -> Vec<StateVec> {
        let mut pts = vec![StateVec::ZERO];
        if self.rho > 1.0 {
            let c = (self.beta * (self.rho - 1.0)).sqrt();
            let z = self.rho - 1.0;
            pts.push(StateVec::new(c, c, z));
            pts.push(StateVec::new(-c, -c, z));
        }
        pts
    }
}

/// A Lorenz state `(x, y, z)` in model units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StateVec {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl StateVec {
    pub const ZERO: StateVec = StateVec {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub const fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub const fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn max_abs(&self) -> f64 {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }

    /// Root-mean-square of the componentwise difference.
    pub fn rmse(&self, other: &StateVec) -> f64 {
        let d = *self - *other;
        ((d.x * d.x + d.y * d.y + d.z * d.z) / 3.0).sqrt()
    }
}

impl Index<usize> for StateVec {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("StateVec index {i} out of range"),
        }
    }
}

impl Add for StateVec {
    type Output = StateVec;
    fn add(self, o: StateVec) -> StateVec {
        StateVec::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for StateVec {
    fn add_assign(&mut self, o: StateVec) {
        *self = *self + o;
    }
}

impl Sub for StateVec {
    type Output = StateVec;
    fn sub(self, o: StateVec) -> StateVec {
        StateVec::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for StateVec {
    type Output = StateVec;
    fn mul(self, s: f64) -> StateVec {
        StateVec::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for StateVec {
    type Output = StateVec;
    fn neg(self) -> StateVec {
        StateVec::new(-self.x, -self.y, -self.z)
    }
}

/// Model step and observation spacing. `t_obs = steps_per_obs * dt` by construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub steps_per_obs: usize,
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            steps_per_obs: 50,
        }
    }
}

impl TimeGrid {
    pub fn new(dt: f64, steps_per_obs: usize) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid("dt", format!("must be positive, got {dt}")));
        }
        if steps_per_obs == 0 {
            return Err(Error::invalid("steps_per_obs", "must be at least 1"));
        }
        Ok(Self { dt, steps_per_obs })
    }

    pub fn t_obs(&self) -> f64 {
        self.steps_per_obs as f64 * self.dt
    }

    /// Number of whole model steps covering `duration` (rounded to nearest).
    pub fn steps_for(&self, duration: f64) -> usize {
        (duration / self.dt).round() as usize
    }
}

pub fn lorenz_rhs(s: StateVec, p: &LorenzParams) -> StateVec {
    StateVec::new(
        p.sigma * (s.y - s.x),
        s.x * (p.rho - s.z) - s.y,
        s.x * s.y - p.beta * s.z,
    )
}

/// One explicit midpoint step.
pub fn rk2_step(s: StateVec, p: &LorenzParams, dt: f64) -> StateVec {
    let k1 = lorenz_rhs(s, p);
    let k2 = lorenz_rhs(s + k1 * (0.5 * dt), p);
    s + k2 * dt
}

/// Integrates `n_steps` midpoint steps and returns every `(state, rhs(state))` pair,
/// starting with the initial point.
pub fn integrate(
    initial: StateVec,
    p: &LorenzParams,
    grid: &TimeGrid,
    n_steps: usize,
) -> Result<Vec<(StateVec, StateVec)>> {
    let mut out = Vec::with_capacity(n_steps + 1);
    let mut s = initial;
    check_bounded(s, 0)?;
    out.push((s, lorenz_rhs(s, p)));
    for step in 1..=n_steps {
        s = rk2_step(s, p, grid.dt);
        check_bounded(s, step)?;
        out.push((s, lorenz_rhs(s, p)));
    }
    Ok(out)
}

/// Advances `n_steps` without recording the path.
pub fn advance(initial: StateVec, p: &LorenzParams, dt: f64, n_steps: usize) -> Result<StateVec> {
    let mut s = initial;
    check_bounded(s, 0)?;
    for step in 1..=n_steps {
        s = rk2_step(s, p, dt);
        check_bounded(s, step)?;
    }
    Ok(s)
}

#[inline]
pub(crate) fn check_bounded(s: StateVec, step: usize) -> Result<()> {
    // NaN fails the comparison as well
    if s.max_abs() <= DIVERGENCE_THRESHOLD {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            threshold: DIVERGENCE_THRESHOLD,
        })
    }
}

/// Long-run mean state on the attractor, used to fill unobserved components.
pub fn climatological_mean(p: &LorenzParams) -> StateVec {
    use std::sync::OnceLock;
    static DEFAULT: OnceLock<StateVec> = OnceLock::new();
    if *p == LorenzParams::default() {
        *DEFAULT.get_or_init(|| compute_climatology(p))
    } else {
        compute_climatology(p)
    }
}

fn compute_climatology(p: &LorenzParams) -> StateVec {
    const DT: f64 = DEFAULT_DT;
    const SPIN_UP: usize = 10_000;
    const SAMPLES: usize = 500_000;
    let mut s = StateVec::new(1.0, 1.0, 1.0);
    for _ in 0..SPIN_UP {
        s = rk2_step(s, p, DT);
    }
    let mut acc = StateVec::ZERO;
    for _ in 0..SAMPLES {
        s = rk2_step(s, p, DT);
        acc += s;
    }
    acc * (1.0 / SAMPLES as f64)
}
