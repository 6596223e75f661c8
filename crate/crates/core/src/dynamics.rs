//! Vehicle kinematics and merging-scenario geometry.
//!
//! Positions are longitudinal, in meters from the control-zone entry of each
//! road. Both paths meet at the conflict point `z_c`. Vehicles are points.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    /// Position, m. May be negative (upstream of the control zone).
    pub z: f64,
    /// Speed, m/s.
    pub v: f64,
}

impl VehicleState {
    pub fn new(z: f64, v: f64) -> Self {
        Self { z, v }
    }

    pub fn is_finite(&self) -> bool {
        self.z.is_finite() && self.v.is_finite()
    }
}

/// Scenario geometry, actuator limits and controller weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// Control-zone length, m.
    pub l_c: f64,
    /// Conflict-point position, m.
    pub z_c: f64,
    /// Sampling interval, s.
    pub dt: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub u_min: f64,
    pub u_max: f64,
    /// Weight on squared acceleration.
    pub w1: f64,
    /// Weight on squared deviation from `v_max`.
    pub w2: f64,
    /// Weight on the logarithmic collision-avoidance penalty.
    pub w3: f64,
    /// Reaction-delay extrapolation time, s.
    pub rho: f64,
    /// Horizon length, steps.
    pub horizon: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            l_c: 70.0,
            z_c: 70.0,
            dt: 0.2,
            v_min: 0.0,
            v_max: 14.0,
            u_min: -3.0,
            u_max: 2.0,
            w1: 1.0,
            w2: 10.0,
            w3: 1000.0,
            rho: 1.0,
            horizon: 10,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let all_finite = [
            self.l_c, self.z_c, self.dt, self.v_min, self.v_max, self.u_min, self.u_max, self.w1,
            self.w2, self.w3, self.rho,
        ]
        .iter()
        .all(|x| x.is_finite());
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if !all_finite {
            return bad("scenario values must be finite");
        }
        if !(0.0 <= self.v_min && self.v_min < self.v_max) {
            return bad("require 0 <= v_min < v_max");
        }
        if !(self.u_min < 0.0 && 0.0 < self.u_max) {
            return bad("require u_min < 0 < u_max");
        }
        if !(self.w1 > 0.0 && self.w2 > 0.0 && self.w3 > 0.0) {
            return bad("objective weights must be positive");
        }
        if self.rho <= 0.0 {
            return bad("rho must be positive");
        }
        if self.horizon < 1 {
            return bad("horizon must be at least 1");
        }
        if self.dt <= 0.0 {
            return bad("dt must be positive");
        }
        if !(0.0 < self.z_c && self.z_c <= self.l_c) {
            return bad("require 0 < z_c <= l_c");
        }
        Ok(())
    }

    pub fn with_rho(&self, rho: f64) -> Self {
        Self {
            rho,
            ..self.clone()
        }
    }
}

/// Exact double-integrator step. Does not clamp: bounds are the caller's job.
pub fn step_cav(x: VehicleState, u: f64, dt: f64) -> Result<VehicleState> {
    if !x.is_finite() || !u.is_finite() || !dt.is_finite() {
        return Err(Error::InvalidInput(format!(
            "non-finite step input: state {x:?}, u {u}, dt {dt}"
        )));
    }
    if dt <= 0.0 {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    Ok(step_unchecked(x, u, dt))
}

#[inline]
pub(crate) fn step_unchecked(x: VehicleState, u: f64, dt: f64) -> VehicleState {
    VehicleState {
        z: x.z + dt * x.v + 0.5 * dt * dt * u,
        v: x.v + dt * u,
    }
}

/// Double-integrator step that never moves backward: if the speed would
/// cross zero within the interval the vehicle stops where its speed hits zero.
#[inline]
pub(crate) fn step_forward_only(x: VehicleState, u: f64, dt: f64) -> VehicleState {
    let next = step_unchecked(x, u, dt);
    if next.v >= 0.0 {
        return next;
    }
    // u < 0 here, otherwise v could not have gone negative from v >= 0
    let v0 = x.v.max(0.0);
    VehicleState {
        z: x.z + v0 * v0 / (2.0 * -u),
        v: 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bound {
    VMin,
    VMax,
    UMin,
    UMax,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoundsCheck {
    pub feasible: bool,
    pub violations: Vec<Bound>,
}

/// Closed-interval check of the speed and acceleration limits.
pub fn check_bounds(x: VehicleState, u: f64, cfg: &ScenarioConfig) -> BoundsCheck {
    let mut violations = Vec::new();
    if !(x.v >= cfg.v_min) {
        violations.push(Bound::VMin);
    }
    if !(x.v <= cfg.v_max) {
        violations.push(Bound::VMax);
    }
    if !(u >= cfg.u_min) {
        violations.push(Bound::UMin);
    }
    if !(u <= cfg.u_max) {
        violations.push(Bound::UMax);
    }
    BoundsCheck {
        feasible: violations.is_empty(),
        violations,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<VehicleState>,
    /// `actions[k]` moves `states[k]` to `states[k + 1]`.
    pub actions: Vec<f64>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(start: VehicleState, dt: f64) -> Self {
        Self {
            states: vec![start],
            actions: Vec::new(),
            dt,
        }
    }

    pub fn push(&mut self, action: f64, next: VehicleState) {
        self.actions.push(action);
        self.states.push(next);
    }

    pub fn last(&self) -> VehicleState {
        *self.states.last().expect("trajectory is never empty")
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn positions(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.z).collect()
    }

    /// Checks `actions.len() == states.len() - 1` and, when `exact` is set,
    /// that every transition is the double-integrator step to within 1e-9.
    pub fn validate(&self, exact: bool) -> Result<()> {
        if self.states.is_empty() || self.actions.len() + 1 != self.states.len() {
            return Err(Error::InvalidInput(format!(
                "trajectory has {} states and {} actions",
                self.states.len(),
                self.actions.len()
            )));
        }
        if exact {
            for (k, (w, &u)) in self.states.windows(2).zip(&self.actions).enumerate() {
                let expect = step_unchecked(w[0], u, self.dt);
                if (expect.z - w[1].z).abs() > 1e-9 || (expect.v - w[1].v).abs() > 1e-9 {
                    return Err(Error::InvalidInput(format!(
                        "transition {k} violates the double-integrator model"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// First time the position sequence reaches `z_c`, linearly interpolated
/// between samples spaced `dt` apart. `None` if it never gets there.
pub fn crossing_time(positions: &[f64], dt: f64, z_c: f64) -> Option<f64> {
    let first = *positions.first()?;
    if first >= z_c {
        return Some(0.0);
    }
    positions.windows(2).enumerate().find_map(|(k, w)| {
        (w[1] >= z_c).then(|| {
            let frac = (z_c - w[0]) / (w[1] - w[0]);
            (k as f64 + frac) * dt
        })
    })
}

pub fn conflict_crossing_time(traj: &Trajectory, z_c: f64) -> Option<f64> {
    crossing_time(&traj.positions(), traj.dt, z_c)
}
