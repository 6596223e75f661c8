//! Horizon problem for the automated vehicle and the predict/solve iteration.
//!
//! The horizon problem minimizes the summed stage cost over the control
//! sequence, with the vehicle states eliminated through the double
//! integrator. Acceleration bounds are handled by projection and speed
//! bounds by a quadratic penalty.

use serde::{Deserialize, Serialize};

use crate::ais::{obs, AisModel, AisState, HorizonPrediction, Observation};
use crate::dynamics::{step_unchecked, ScenarioConfig, VehicleState};
use crate::{Error, Result};

/// Added inside the logarithm of the collision penalty.
pub const EPS_LOG: f64 = 1e-6;
/// Weight of the quadratic speed-bound penalty.
pub const SPEED_PENALTY: f64 = 1e4;
pub const MAX_ITERATIONS: usize = 500;
/// Projected-gradient norm below which a solve counts as converged.
pub const PG_TOLERANCE: f64 = 1e-6;
const ARMIJO_C: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlSequence(pub Vec<f64>);

impl ControlSequence {
    pub fn zeros(h: usize) -> Self {
        Self(vec![0.0; h])
    }

    pub fn constant(h: usize, u: f64) -> Self {
        Self(vec![u; h])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpcSolution {
    pub u: ControlSequence,
    /// `H + 1` states starting at the current one.
    pub states: Vec<VehicleState>,
    pub objective: f64,
    pub objective_init: f64,
    pub iterations: usize,
    pub pg_norm: f64,
    pub converged: bool,
}

impl MpcSolution {
    /// Largest amount by which a predicted speed leaves `[v_min, v_max]`.
    pub fn speed_violation(&self, cfg: &ScenarioConfig) -> f64 {
        self.states
            .iter()
            .skip(1)
            .map(|x| (x.v - cfg.v_max).max(cfg.v_min - x.v).max(0.0))
            .fold(0.0, f64::max)
    }
}

/// `ω₁u² + ω₂(v₁ − v_max)² − ω₃ ln((z₁ − z_c + ρv₁)² + (ẑ₂ − z_c + ρv̂₂)² + ε)`.
pub fn stage_cost(x1_next: VehicleState, u1: f64, z2_hat: f64, v2_hat: f64, cfg: &ScenarioConfig) -> f64 {
    let a = x1_next.z - cfg.z_c + cfg.rho * x1_next.v;
    let b = z2_hat - cfg.z_c + cfg.rho * v2_hat;
    cfg.w1 * u1 * u1 + cfg.w2 * (x1_next.v - cfg.v_max).powi(2)
        - cfg.w3 * (a * a + b * b + EPS_LOG).ln()
}

fn speed_penalty(v: f64, cfg: &ScenarioConfig) -> (f64, f64) {
    let hi = (v - cfg.v_max).max(0.0);
    let lo = (cfg.v_min - v).max(0.0);
    (
        SPEED_PENALTY * (hi * hi + lo * lo),
        2.0 * SPEED_PENALTY * (hi - lo),
    )
}

pub fn rollout(x0: VehicleState, u: &[f64], dt: f64) -> Vec<VehicleState> {
    let mut xs = Vec::with_capacity(u.len() + 1);
    xs.push(x0);
    for &uk in u {
        let next = step_unchecked(*xs.last().unwrap_or(&x0), uk, dt);
        xs.push(next);
    }
    xs
}

/// The horizon problem for one decision: start state and a fixed prediction.
#[derive(Debug, Clone)]
pub struct HorizonProblem<'a> {
    pub x0: VehicleState,
    pub z_hat: &'a [f64],
    pub v_hat: &'a [f64],
    pub cfg: &'a ScenarioConfig,
}

impl HorizonProblem<'_> {
    pub fn horizon(&self) -> usize {
        self.z_hat.len()
    }

    /// Summed stage cost plus speed penalty.
    pub fn objective(&self, u: &[f64]) -> f64 {
        let xs = rollout(self.x0, u, self.cfg.dt);
        let mut j = 0.0;
        for k in 0..u.len() {
            let x = xs[k + 1];
            j += stage_cost(x, u[k], self.z_hat[k], self.v_hat[k], self.cfg);
            j += speed_penalty(x.v, self.cfg).0;
        }
        j
    }

    /// Objective and its gradient, the latter by a backward costate sweep.
    pub fn objective_and_gradient(&self, u: &[f64]) -> (f64, Vec<f64>) {
        let cfg = self.cfg;
        let dt = cfg.dt;
        let h = u.len();
        let xs = rollout(self.x0, u, dt);
        let mut j = 0.0;
        let mut dz = vec![0.0; h];
        let mut dv = vec![0.0; h];
        for k in 0..h {
            let x = xs[k + 1];
            j += stage_cost(x, u[k], self.z_hat[k], self.v_hat[k], cfg);
            let (p, dp) = speed_penalty(x.v, cfg);
            j += p;
            let a = x.z - cfg.z_c + cfg.rho * x.v;
            let b = self.z_hat[k] - cfg.z_c + cfg.rho * self.v_hat[k];
            let d = a * a + b * b + EPS_LOG;
            dz[k] = -cfg.w3 * 2.0 * a / d;
            dv[k] = -cfg.w3 * 2.0 * a * cfg.rho / d + 2.0 * cfg.w2 * (x.v - cfg.v_max) + dp;
        }
        let mut grad = vec![0.0; h];
        let (mut lz, mut lv) = (0.0, 0.0);
        for k in (0..h).rev() {
            // costate of state k+1
            let nz = dz[k] + lz;
            let nv = dv[k] + dt * lz + lv;
            lz = nz;
            lv = nv;
            grad[k] = 2.0 * cfg.w1 * u[k] + 0.5 * dt * dt * lz + dt * lv;
        }
        (j, grad)
    }

    fn project(&self, u: &mut [f64]) {
        for x in u {
            *x = x.clamp(self.cfg.u_min, self.cfg.u_max);
        }
    }

    fn pg_norm(&self, u: &[f64], g: &[f64]) -> f64 {
        u.iter()
            .zip(g)
            .map(|(x, gi)| {
                let p = (x - gi).clamp(self.cfg.u_min, self.cfg.u_max);
                (p - x).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Projected gradient descent from `u0` with Armijo backtracking and
    /// Barzilai-Borwein trial steps.
    pub fn descend(&self, u0: &[f64]) -> Result<MpcSolution> {
        let mut u = u0.to_vec();
        self.project(&mut u);
        let j_init = self.objective(u0);
        let (mut j, mut g) = self.objective_and_gradient(&u);
        if !j.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Solver(format!(
                "non-finite objective {j} at the initial control sequence"
            )));
        }
        let mut alpha = 1e-2;
        let mut pg = self.pg_norm(&u, &g);
        let mut iterations = 0;
        while pg >= PG_TOLERANCE && iterations < MAX_ITERATIONS {
            iterations += 1;
            let mut step = alpha;
            let mut accepted = None;
            for _ in 0..MAX_BACKTRACKS {
                let mut cand: Vec<f64> = u.iter().zip(&g).map(|(x, gi)| x - step * gi).collect();
                self.project(&mut cand);
                let decrease: f64 = g.iter().zip(cand.iter().zip(&u)).map(|(gi, (c, x))| gi * (c - x)).sum();
                let jc = self.objective(&cand);
                if jc.is_finite() && jc <= j + ARMIJO_C * decrease {
                    accepted = Some((cand, jc));
                    break;
                }
                step *= BACKTRACK;
            }
            let Some((cand, jc)) = accepted else {
                break;
            };
            let (_, gc) = self.objective_and_gradient(&cand);
            let s: Vec<f64> = cand.iter().zip(&u).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = gc.iter().zip(&g).map(|(a, b)| a - b).collect();
            let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
            let ss: f64 = s.iter().map(|a| a * a).sum();
            alpha = if sy > 0.0 { (ss / sy).clamp(1e-8, 1e3) } else { (2.0 * step).min(1e3) };
            let done = ss == 0.0;
            u = cand;
            j = jc;
            g = gc;
            pg = self.pg_norm(&u, &g);
            if done {
                break;
            }
        }
        let states = rollout(self.x0, &u, self.cfg.dt);
        Ok(MpcSolution {
            u: ControlSequence(u),
            states,
            objective: j,
            objective_init: j_init,
            iterations,
            pg_norm: pg,
            converged: pg < PG_TOLERANCE,
        })
    }
}

/// Solves the horizon problem against a fixed prediction.
///
/// The solve starts from `u_init`, and additionally from full throttle and
/// full braking; the best of the three local solutions is returned. Since the
/// run from `u_init` never increases the objective, the result is never worse
/// than `u_init`.
pub fn solve_mpc(
    x1: VehicleState,
    pred: &HorizonPrediction,
    cfg: &ScenarioConfig,
    u_init: &ControlSequence,
) -> Result<MpcSolution> {
    let (z_hat, v_hat) = match pred {
        HorizonPrediction::Merge { z_hat, v_hat } => (z_hat.as_slice(), v_hat.as_slice()),
        HorizonPrediction::Ngsim { .. } => {
            return Err(Error::Variant("the controller needs a merge-variant prediction".into()))
        }
    };
    let h = z_hat.len();
    if h == 0 || v_hat.len() != h || u_init.len() != h {
        return Err(Error::Shape(format!(
            "prediction lengths ({}, {}) and initial controls ({}) must share one horizon",
            z_hat.len(),
            v_hat.len(),
            u_init.len()
        )));
    }
    if !x1.is_finite() || !pred.is_finite() || u_init.0.iter().any(|u| !u.is_finite()) {
        return Err(Error::InvalidInput("non-finite solver input".into()));
    }
    let problem = HorizonProblem {
        x0: x1,
        z_hat,
        v_hat,
        cfg,
    };
    let mut best = problem.descend(&u_init.0)?;
    for start in [cfg.u_max, cfg.u_min] {
        let sol = problem.descend(&vec![start; h])?;
        if sol.objective < best.objective {
            best = MpcSolution {
                objective_init: best.objective_init,
                ..sol
            };
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    /// `‖u⁽ʲ⁾ − u⁽ʲ⁻¹⁾‖` for `j = 1..j_max`.
    pub change_norms: Vec<f64>,
    pub objectives: Vec<f64>,
    pub solver_iterations: Vec<usize>,
    pub converged: Vec<bool>,
    pub max_speed_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterativeStep {
    /// First control of the final iterate, to be applied now.
    pub u: f64,
    pub state: AisState,
    pub solution: MpcSolution,
    pub prediction: HorizonPrediction,
    pub diagnostics: IterationDiagnostics,
}

/// One decision of the iterative scheme: update the encoder, then alternate
/// `j_max` times between decoding with the first control of the previous
/// iterate and solving against that prediction, starting from all zeros.
pub fn iterative_mpc_step(
    model: &AisModel,
    s_prev: &AisState,
    y: &Observation,
    u_prev: f64,
    cfg: &ScenarioConfig,
    j_max: usize,
) -> Result<IterativeStep> {
    if j_max < 1 {
        return Err(Error::InvalidConfig("j_max must be at least 1".into()));
    }
    if !model.variant().is_merge() {
        return Err(Error::Variant("the controller needs a merge-variant model".into()));
    }
    let s = model.encode(s_prev, y, &[u_prev])?;
    let x1 = VehicleState::new(y.0[obs::Z1], y.0[obs::V1]);
    let h = model.horizon();
    let mut u = ControlSequence::zeros(h);
    let mut diag = IterationDiagnostics {
        change_norms: Vec::with_capacity(j_max),
        objectives: Vec::with_capacity(j_max),
        solver_iterations: Vec::with_capacity(j_max),
        converged: Vec::with_capacity(j_max),
        max_speed_violation: 0.0,
    };
    let mut last = None;
    for _ in 0..j_max {
        let pred = model.decode(&s, &u.0[..1])?;
        let sol = solve_mpc(x1, &pred, cfg, &u)?;
        let change = sol
            .u
            .0
            .iter()
            .zip(&u.0)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        diag.change_norms.push(change);
        diag.objectives.push(sol.objective);
        diag.solver_iterations.push(sol.iterations);
        diag.converged.push(sol.converged);
        diag.max_speed_violation = diag.max_speed_violation.max(sol.speed_violation(cfg));
        u = sol.u.clone();
        last = Some((sol, pred));
    }
    let (solution, prediction) = last.expect("j_max >= 1");
    Ok(IterativeStep {
        u: solution.u.0[0],
        state: s,
        solution,
        prediction,
        diagnostics: diag,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ais::Variant;
    use crate::nn::finite_diff_vec;
    use crate::nn::GradCheckOptions;
    use crate::seed::rng_from_seed;
    use rand::Rng;

    fn cfg() -> ScenarioConfig {
        ScenarioConfig::default()
    }

    fn merge_pred(z: Vec<f64>, v: Vec<f64>) -> HorizonPrediction {
        HorizonPrediction::Merge { z_hat: z, v_hat: v }
    }

    /// Prediction of a vehicle moving at constant speed from `z0`.
    fn cruising(z0: f64, v: f64, h: usize, dt: f64) -> HorizonPrediction {
        merge_pred(
            (1..=h).map(|k| z0 + v * dt * k as f64).collect(),
            vec![v; h],
        )
    }

    fn grid_best(x0: VehicleState, pred: &HorizonPrediction, c: &ScenarioConfig) -> (f64, f64) {
        let p = HorizonProblem {
            x0,
            z_hat: pred.z_hat(),
            v_hat: pred.v_hat(),
            cfg: c,
        };
        let h = pred.z_hat().len();
        (0..=500)
            .map(|i| c.u_min + (c.u_max - c.u_min) * i as f64 / 500.0)
            .map(|a| (p.objective(&vec![a; h]), a))
            .fold((f64::INFINITY, 0.0), |b, x| if x.0 < b.0 { x } else { b })
    }

    #[test]
    fn stage_cost_examples() {
        let c = cfg();
        let x = VehicleState::new(50.0, 14.0);
        let base = stage_cost(x, 0.0, 50.0, 14.0, &c);
        // direct evaluation: offsets 50 - 70 + 14 = -6 for both vehicles
        let expect = -1000.0 * (36.0f64 + 36.0 + 1e-6).ln();
        assert!((base - expect).abs() < 1e-9);
        assert!((base - -4276.666).abs() < 1e-3);
        assert!((stage_cost(x, 1.0, 50.0, 14.0, &c) - (base + 1.0)).abs() < 1e-9);
        let mut c0 = c.clone();
        c0.w3 = 0.0;
        assert_eq!(stage_cost(x, 0.0, 50.0, 14.0, &c0), 0.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let c = cfg();
        let mut rng = rng_from_seed(5);
        for _ in 0..50 {
            let x0 = VehicleState::new(rng.gen_range(0.0..70.0), rng.gen_range(0.0..14.0));
            let pred = cruising(rng.gen_range(0.0..70.0), rng.gen_range(5.0..14.0), 10, c.dt);
            let p = HorizonProblem {
                x0,
                z_hat: pred.z_hat(),
                v_hat: pred.v_hat(),
                cfg: &c,
            };
            let u: Vec<f64> = (0..10).map(|_| rng.gen_range(-3.0..2.0)).collect();
            let (_, g) = p.objective_and_gradient(&u);
            // objective values reach 1e5, so central differences carry ~1e-7
            // of rounding noise; components below 1 are compared absolutely
            let opts = GradCheckOptions {
                step: 1e-4,
                tolerance: 1e-6,
                floor: 1.0,
                ..GradCheckOptions::default()
            };
            let rep = finite_diff_vec(&u, &g, |v| p.objective(v), &opts);
            assert!(rep.passed, "{rep:?}");
        }
    }

    #[test]
    fn far_away_driver_gives_near_zero_control() {
        let c = cfg();
        let pred = merge_pred(vec![-1000.0; 10], vec![0.0; 10]);
        let x0 = VehicleState::new(0.0, 14.0);
        let sol = solve_mpc(x0, &pred, &c, &ControlSequence::zeros(10)).unwrap();
        assert!(sol.u.0.iter().all(|u| u.abs() < 0.05), "{:?}", sol.u);
        let (jg, ag) = grid_best(x0, &pred, &c);
        assert!(ag.abs() < 0.05);
        assert!(sol.objective <= jg + 1e-9);
    }

    #[test]
    fn standing_start_accelerates() {
        let c = cfg();
        let pred = merge_pred(vec![-1000.0; 10], vec![0.0; 10]);
        let x0 = VehicleState::new(0.0, 0.0);
        let sol = solve_mpc(x0, &pred, &c, &ControlSequence::zeros(10)).unwrap();
        assert!(sol.u.0[0] > 0.0 && sol.u.0[1] > 0.0);
        let (_, ag) = grid_best(x0, &pred, &c);
        assert!(ag > 0.0);
    }

    #[test]
    fn bounds_descent_and_exact_rollout() {
        let c = cfg();
        let mut rng = rng_from_seed(12);
        for _ in 0..100 {
            let x0 = VehicleState::new(rng.gen_range(0.0..70.0), rng.gen_range(0.0..14.0));
            let pred = cruising(rng.gen_range(0.0..70.0), rng.gen_range(5.0..14.0), 10, c.dt);
            let u0 = ControlSequence((0..10).map(|_| rng.gen_range(-4.0..3.0)).collect());
            let sol = solve_mpc(x0, &pred, &c, &u0).unwrap();
            assert!(sol.u.0.iter().all(|u| (c.u_min..=c.u_max).contains(u)));
            assert!(sol.objective <= sol.objective_init);
            let p = HorizonProblem {
                x0,
                z_hat: pred.z_hat(),
                v_hat: pred.v_hat(),
                cfg: &c,
            };
            assert!(sol.objective <= p.objective(&u0.0));
            let xs = rollout(x0, &sol.u.0, c.dt);
            assert_eq!(xs, sol.states);
            if sol.converged {
                assert!(sol.speed_violation(&c) < 0.01);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let c = cfg();
        let pred = cruising(0.0, 10.0, 10, 0.2);
        assert!(matches!(
            solve_mpc(VehicleState::new(0.0, 10.0), &pred, &c, &ControlSequence::zeros(9)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn larger_rho_never_accelerates_harder() {
        // the driver is predicted to reach the conflict point slightly first
        for (z1, v1, lead) in [(30.0, 10.0, 0.3), (40.0, 12.0, 0.5), (20.0, 11.0, 0.8), (35.0, 9.0, 0.4)] {
            let t1 = (70.0 - z1) / v1;
            let v2 = 11.0;
            let z2 = 70.0 - v2 * (t1 - lead);
            let pred = cruising(z2, v2, 10, 0.2);
            let mut prev = f64::INFINITY;
            for rho in [0.6, 0.8, 1.0] {
                let c = cfg().with_rho(rho);
                let sol = solve_mpc(VehicleState::new(z1, v1), &pred, &c, &ControlSequence::zeros(10))
                    .unwrap();
                assert!(sol.u.0[0] <= prev + 1e-9, "rho {rho}: {} > {prev}", sol.u.0[0]);
                prev = sol.u.0[0];
            }
        }
    }

    #[test]
    fn iterative_step_definition_and_determinism() {
        let c = cfg();
        let m = AisModel::new(Variant::Merge, 10, 0.2, 21).unwrap();
        let s0 = m.init_state();
        let y = Observation::merge(20.0, 10.0, 0.0, 15.0, 11.0, 0.0);
        let a = iterative_mpc_step(&m, &s0, &y, 0.0, &c, 1).unwrap();
        let s = m.encode(&s0, &y, &[0.0]).unwrap();
        let pred = m.decode(&s, &[0.0]).unwrap();
        let direct = solve_mpc(VehicleState::new(20.0, 10.0), &pred, &c, &ControlSequence::zeros(10)).unwrap();
        assert_eq!(a.solution, direct);
        assert_eq!(a.u, direct.u.0[0]);
        let b = iterative_mpc_step(&m, &s0, &y, 0.0, &c, 3).unwrap();
        let b2 = iterative_mpc_step(&m, &s0, &y, 0.0, &c, 3).unwrap();
        assert_eq!(b, b2);
        assert_eq!(b.diagnostics.change_norms.len(), 3);
        assert!(iterative_mpc_step(&m, &s0, &y, 0.0, &c, 0).is_err());
    }
}
