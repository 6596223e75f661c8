//! Feature-based human-driver model.
//!
//! The driver picks the constant acceleration that minimizes a weighted sum of
//! features over a short rollout: squared acceleration, squared deviation from
//! a desired speed, and a proximity feature that peaks when both vehicles are
//! near the conflict point at the same time. Different weights span
//! conservative to aggressive styles.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{step_forward_only, ScenarioConfig, VehicleState};
use crate::seed::rng_from_seed;
use crate::{Error, Result};

/// Length scale of the proximity feature, m.
pub const PROXIMITY_SIGMA: f64 = 10.0;
/// Number of evenly spaced candidate accelerations over `[u_min, u_max]`.
pub const ACCEL_GRID_SIZE: usize = 41;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrlWeights {
    pub theta_accel: f64,
    pub theta_speed: f64,
    pub theta_prox: f64,
    /// Desired speed, m/s.
    pub v_des: f64,
    /// Rollout length, steps.
    pub lookahead: usize,
}

impl IrlWeights {
    pub fn validate(&self, cfg: &ScenarioConfig) -> Result<()> {
        let thetas = [self.theta_accel, self.theta_speed, self.theta_prox];
        if thetas.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::InvalidConfig(
                "feature weights must be finite and non-negative".into(),
            ));
        }
        if thetas.iter().all(|t| *t == 0.0) {
            return Err(Error::InvalidConfig(
                "at least one feature weight must be positive".into(),
            ));
        }
        if !(self.v_des > 0.0 && self.v_des <= 1.5 * cfg.v_max) {
            return Err(Error::InvalidConfig(format!(
                "desired speed {} outside (0, 1.5 v_max]",
                self.v_des
            )));
        }
        if self.lookahead < 1 {
            return Err(Error::InvalidConfig("lookahead must be >= 1".into()));
        }
        Ok(())
    }
}

/// Named driving styles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Aggressive,
    Conservative,
}

impl Preset {
    pub fn weights(self, cfg: &ScenarioConfig) -> IrlWeights {
        match self {
            Preset::Aggressive => IrlWeights {
                theta_accel: 0.5,
                theta_speed: 5.0,
                theta_prox: 1.0,
                v_des: 1.2 * cfg.v_max,
                lookahead: 10,
            },
            Preset::Conservative => IrlWeights {
                theta_accel: 1.0,
                theta_speed: 1.0,
                theta_prox: 200.0,
                v_des: 0.7 * cfg.v_max,
                lookahead: 10,
            },
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aggressive" => Ok(Preset::Aggressive),
            "conservative" => Ok(Preset::Conservative),
            other => Err(Error::InvalidInput(format!("unknown preset `{other}`"))),
        }
    }
}

/// Sampling interval per weight, `(lower, upper)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleRange {
    pub theta_accel: (f64, f64),
    pub theta_speed: (f64, f64),
    pub theta_prox: (f64, f64),
    pub v_des: (f64, f64),
    pub lookahead: (usize, usize),
}

impl Default for StyleRange {
    fn default() -> Self {
        Self {
            theta_accel: (0.5, 2.0),
            theta_speed: (0.5, 5.0),
            theta_prox: (0.0, 200.0),
            v_des: (9.8, 16.8),
            lookahead: (5, 15),
        }
    }
}

impl StyleRange {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("theta_accel", self.theta_accel),
            ("theta_speed", self.theta_speed),
            ("theta_prox", self.theta_prox),
            ("v_des", self.v_des),
        ] {
            if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
                return Err(Error::InvalidConfig(format!(
                    "style range `{name}` must satisfy 0 <= lower <= upper"
                )));
            }
        }
        if self.lookahead.0 > self.lookahead.1 {
            return Err(Error::InvalidConfig(
                "style range `lookahead` must satisfy lower <= upper".into(),
            ));
        }
        Ok(())
    }

    /// A range that always yields exactly `w`.
    pub fn degenerate(w: &IrlWeights) -> Self {
        Self {
            theta_accel: (w.theta_accel, w.theta_accel),
            theta_speed: (w.theta_speed, w.theta_speed),
            theta_prox: (w.theta_prox, w.theta_prox),
            v_des: (w.v_des, w.v_des),
            lookahead: (w.lookahead, w.lookahead),
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Uniform, independent per field. Identical seeds give identical weights.
pub fn sample_irl_weights(seed: u64, range: &StyleRange) -> Result<IrlWeights> {
    range.validate()?;
    let mut rng = rng_from_seed(seed);
    Ok(IrlWeights {
        theta_accel: uniform(&mut rng, range.theta_accel),
        theta_speed: uniform(&mut rng, range.theta_speed),
        theta_prox: uniform(&mut rng, range.theta_prox),
        v_des: uniform(&mut rng, range.v_des),
        lookahead: rng.gen_range(range.lookahead.0..=range.lookahead.1),
    })
}

/// Candidate accelerations, ordered by `|a|` then by value so that a strict
/// improvement test breaks ties toward the smaller magnitude.
pub fn accel_grid(cfg: &ScenarioConfig) -> Vec<f64> {
    let n = ACCEL_GRID_SIZE;
    let step = (cfg.u_max - cfg.u_min) / (n - 1) as f64;
    let mut grid: Vec<f64> = (0..n).map(|i| cfg.u_min + step * i as f64).collect();
    // snap values that should be exactly zero
    for a in grid.iter_mut() {
        if a.abs() < 1e-12 {
            *a = 0.0;
        }
    }
    grid.sort_by(|a, b| a.abs().total_cmp(&b.abs()).then(a.total_cmp(b)));
    grid
}

/// Proximity feature: peaks when both vehicles sit at the conflict point.
pub fn proximity(z_self: f64, z_other: f64, z_c: f64) -> f64 {
    let d2 = (z_self - z_c).powi(2) + (z_other - z_c).powi(2);
    (-d2 / (PROXIMITY_SIGMA * PROXIMITY_SIGMA)).exp()
}

/// Rollout cost of holding acceleration `a` for `w.lookahead` steps. The other
/// vehicle is extrapolated at constant speed.
pub fn rollout_cost(
    x_self: VehicleState,
    x_other: VehicleState,
    a: f64,
    w: &IrlWeights,
    cfg: &ScenarioConfig,
) -> f64 {
    let mut x = x_self;
    let mut cost = 0.0;
    for k in 1..=w.lookahead {
        x = step_forward_only(x, a, cfg.dt);
        let z_other = x_other.z + k as f64 * cfg.dt * x_other.v.max(0.0);
        cost += w.theta_accel * a * a
            + w.theta_speed * (x.v - w.v_des).powi(2)
            + w.theta_prox * proximity(x.z, z_other, cfg.z_c);
    }
    cost
}

/// Exhaustive grid search for the cost-minimizing constant acceleration.
pub fn hdv_action(
    x_self: VehicleState,
    x_other: VehicleState,
    w: &IrlWeights,
    cfg: &ScenarioConfig,
) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    for a in accel_grid(cfg) {
        let c = rollout_cost(x_self, x_other, a, w, cfg);
        if c < best.0 {
            best = (c, a);
        }
    }
    best.1
}

/// Advances the human-driven vehicle one step. Speed never goes negative and
/// there is no upper speed clamp.
pub fn step_hdv(
    x: VehicleState,
    x_other: VehicleState,
    w: &IrlWeights,
    cfg: &ScenarioConfig,
) -> Result<(VehicleState, f64)> {
    if !x.is_finite() || !x_other.is_finite() {
        return Err(Error::InvalidInput("non-finite vehicle state".into()));
    }
    let a = hdv_action(x, x_other, w, cfg);
    Ok((step_forward_only(x, a, cfg.dt), a))
}
