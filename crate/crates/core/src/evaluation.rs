//! Closed-loop episodes, the safety verdict, Monte-Carlo safety tables and
//! empirical prediction-quality bounds.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ais::{obs, AisModel, HorizonPrediction, Observation};
use crate::driver::{hdv_action, sample_irl_weights, IrlWeights, StyleRange};
use crate::dynamics::{conflict_crossing_time, ScenarioConfig, Trajectory, VehicleState};
use crate::mpc::{iterative_mpc_step, stage_cost};
use crate::seed::{derive_seed, rng_from_seed, stream};
use crate::training::{
    gap_acceptance_action, run_closed_loop, sample_initial, target_at, trainable_steps, Dataset,
    EpisodePredictor, Schema,
};
use crate::{Error, Result};

/// Default minimum crossing-time gap for a safe episode, s.
pub const TAU_SAFE: f64 = 1.0;
/// Default number of predict/solve alternations per decision.
pub const J_MAX: usize = 3;

/// Automated-vehicle policy for a closed-loop run.
#[derive(Debug, Clone, Copy)]
pub enum Controller<'a> {
    IterativeMpc { model: &'a AisModel, j_max: usize },
    GapAcceptance,
    Irl(&'a IrlWeights),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    IterativeMpc,
    GapAcceptance,
    Irl,
}

impl Controller<'_> {
    pub fn kind(&self) -> ControllerKind {
        match self {
            Controller::IterativeMpc { .. } => ControllerKind::IterativeMpc,
            Controller::GapAcceptance => ControllerKind::GapAcceptance,
            Controller::Irl(_) => ControllerKind::Irl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub controller: ControllerKind,
    pub cav: Trajectory,
    pub hdv: Trajectory,
    /// `stage_costs[k]` is incurred by the transition into state `k + 1`,
    /// evaluated on the realized human-driver state.
    pub stage_costs: Vec<f64>,
    /// Encoder state after each decision (iterative MPC only).
    pub ais_states: Vec<Vec<f64>>,
    /// Per decision, the change norms of the predict/solve iterations.
    pub change_norms: Vec<Vec<f64>>,
    pub cav_crossing: Option<f64>,
    pub hdv_crossing: Option<f64>,
    pub tau_safe: f64,
    pub safe: bool,
    pub capped: bool,
    pub seed: u64,
    pub hdv_weights: IrlWeights,
    pub cav_weights: Option<IrlWeights>,
}

impl EpisodeLog {
    pub fn len(&self) -> usize {
        self.cav.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cav.is_empty()
    }
}

/// Safe iff the crossing times differ by at least `tau_safe`; a vehicle that
/// never reaches the conflict point cannot conflict.
pub fn is_safe_times(cav: Option<f64>, hdv: Option<f64>, tau_safe: f64) -> bool {
    match (cav, hdv) {
        (Some(a), Some(b)) => (a - b).abs() >= tau_safe,
        _ => true,
    }
}

pub fn is_safe(log: &EpisodeLog, tau_safe: f64) -> bool {
    is_safe_times(log.cav_crossing, log.hdv_crossing, tau_safe)
}

/// Runs one episode from `init` until both vehicles clear the conflict point
/// or the step cap.
pub fn run_episode(
    controller: Controller<'_>,
    hdv_weights: &IrlWeights,
    init: (VehicleState, VehicleState),
    cfg: &ScenarioConfig,
    seed: u64,
    tau_safe: f64,
) -> Result<EpisodeLog> {
    cfg.validate()?;
    hdv_weights.validate(cfg)?;
    let mut ais_states = Vec::new();
    let mut change_norms = Vec::new();
    let run = match controller {
        Controller::IterativeMpc { model, j_max } => {
            if model.horizon() != cfg.horizon || (model.dt() - cfg.dt).abs() > 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "model (H = {}, dt = {}) does not match the scenario (H = {}, dt = {})",
                    model.horizon(),
                    model.dt(),
                    cfg.horizon,
                    cfg.dt
                )));
            }
            let mut s = model.init_state();
            run_closed_loop(init, hdv_weights, cfg, |_, cav, hdv, prev| {
                let y = Observation::merge(cav.z, cav.v, prev[0], hdv.z, hdv.v, prev[1]);
                let step = iterative_mpc_step(model, &s, &y, prev[0], cfg, j_max)?;
                s = step.state;
                ais_states.push(s.0.clone());
                change_norms.push(step.diagnostics.change_norms);
                Ok(step.u)
            })?
        }
        Controller::GapAcceptance => run_closed_loop(init, hdv_weights, cfg, |_, c, h, _| {
            Ok(gap_acceptance_action(c, h, cfg))
        })?,
        Controller::Irl(w) => {
            w.validate(cfg)?;
            run_closed_loop(init, hdv_weights, cfg, |_, c, h, _| Ok(hdv_action(c, h, w, cfg)))?
        }
    };

    let mut cav = Trajectory::new(run.cav[0], cfg.dt);
    let mut hdv = Trajectory::new(run.hdv[0], cfg.dt);
    let mut stage_costs = Vec::with_capacity(run.actions.len());
    for (k, a) in run.actions.iter().enumerate() {
        cav.push(a[0], run.cav[k + 1]);
        hdv.push(a[1], run.hdv[k + 1]);
        let h = run.hdv[k + 1];
        stage_costs.push(stage_cost(run.cav[k + 1], a[0], h.z, h.v, cfg));
    }
    let cav_crossing = conflict_crossing_time(&cav, cfg.z_c);
    let hdv_crossing = conflict_crossing_time(&hdv, cfg.z_c);
    Ok(EpisodeLog {
        controller: controller.kind(),
        cav,
        hdv,
        stage_costs,
        ais_states,
        change_norms,
        cav_crossing,
        hdv_crossing,
        tau_safe,
        safe: is_safe_times(cav_crossing, hdv_crossing, tau_safe),
        capped: run.capped,
        seed,
        hdv_weights: hdv_weights.clone(),
        cav_weights: match controller {
            Controller::Irl(w) => Some(w.clone()),
            _ => None,
        },
    })
}

/// Monte-Carlo settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    pub rho_values: Vec<f64>,
    pub n: usize,
    pub master_seed: u64,
    pub tau_safe: f64,
    pub j_max: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            rho_values: vec![0.6, 0.8, 1.0],
            n: 500,
            master_seed: 0,
            tau_safe: TAU_SAFE,
            j_max: J_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyRow {
    pub model: String,
    pub rho: f64,
    pub safe: usize,
    pub total: usize,
    pub percentage: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SafetyTable {
    pub rows: Vec<SafetyRow>,
}

impl SafetyTable {
    pub fn extend(&mut self, other: SafetyTable) {
        self.rows.extend(other.rows);
    }

    pub fn row(&self, model: &str, rho: f64) -> Option<&SafetyRow> {
        self.rows.iter().find(|r| r.model == model && r.rho == rho)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<24} {:>6} {:>8} {:>8} {:>9}", "model", "rho", "safe", "total", "percent");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<24} {:>6.2} {:>8} {:>8} {:>8.2}%",
                r.model, r.rho, r.safe, r.total, r.percentage
            );
        }
        out
    }

    /// `{"meta": {...}, "rows": [...]}` with `meta` built from key/value pairs.
    pub fn to_json(&self, meta: &[(String, String)]) -> String {
        let meta: serde_json::Map<String, serde_json::Value> = meta
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
            .collect();
        let doc = serde_json::json!({ "meta": meta, "rows": self.rows });
        let mut s = serde_json::to_string_pretty(&doc).unwrap_or_default();
        s.push('\n');
        s
    }
}

/// Nominal start of a single demonstration episode: automated vehicle at
/// (z, v), human driver at (z, v).
pub const SIMULATE_NOMINAL: ((f64, f64), (f64, f64)) = ((12.0, 10.0), (0.0, 10.0));
/// Seeded perturbation half-widths around [`SIMULATE_NOMINAL`], (m, m/s).
pub const SIMULATE_JITTER: (f64, f64) = (1.0, 0.5);

/// Initial states for a demonstration run: [`SIMULATE_NOMINAL`] with each
/// coordinate shifted uniformly within [`SIMULATE_JITTER`].
pub fn simulate_initial(seed: u64) -> (VehicleState, VehicleState) {
    let mut rng = rng_from_seed(derive_seed(seed, &[stream::INITIAL]));
    let (dz, dv) = SIMULATE_JITTER;
    let mut jitter = |(z, v): (f64, f64)| {
        VehicleState::new(z + rng.gen_range(-dz..=dz), v + rng.gen_range(-dv..=dv))
    };
    let cav = jitter(SIMULATE_NOMINAL.0);
    let hdv = jitter(SIMULATE_NOMINAL.1);
    (cav, hdv)
}

/// Seed, human-driver weights and initial states of Monte-Carlo episode `i`.
/// Independent of the ρ value, so cells are paired.
pub fn mc_episode(
    master_seed: u64,
    i: usize,
    range: &StyleRange,
) -> Result<(u64, IrlWeights, (VehicleState, VehicleState))> {
    let seed = derive_seed(master_seed, &[stream::EPISODE, i as u64]);
    let w = sample_irl_weights(derive_seed(seed, &[stream::HDV_WEIGHTS]), range)?;
    let init = sample_initial(derive_seed(seed, &[stream::INITIAL]));
    Ok((seed, w, init))
}

/// Safe-episode counts of the iterative controller for each ρ value.
///
/// The same episodes (human-driver weights and initial states) are used in
/// every cell. Any failed episode fails the whole table.
pub fn monte_carlo(
    model: &AisModel,
    label: &str,
    mc: &McConfig,
    cfg: &ScenarioConfig,
    range: &StyleRange,
) -> Result<SafetyTable> {
    if mc.n == 0 {
        return Err(Error::InvalidConfig("n must be at least 1".into()));
    }
    if mc.rho_values.is_empty() {
        return Err(Error::InvalidConfig("at least one rho value required".into()));
    }
    if mc.j_max < 1 {
        return Err(Error::InvalidConfig("j_max must be at least 1".into()));
    }
    cfg.validate()?;
    range.validate()?;
    let episodes = (0..mc.n)
        .map(|i| mc_episode(mc.master_seed, i, range))
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<(usize, usize)> = (0..mc.rho_values.len())
        .flat_map(|r| (0..mc.n).map(move |i| (r, i)))
        .collect();
    let verdicts = cells
        .par_iter()
        .map(|&(r, i)| {
            let c = cfg.with_rho(mc.rho_values[r]);
            c.validate()?;
            let (seed, w, init) = &episodes[i];
            let ctrl = Controller::IterativeMpc {
                model,
                j_max: mc.j_max,
            };
            run_episode(ctrl, w, *init, &c, *seed, mc.tau_safe).map(|log| log.safe)
        })
        .collect::<Result<Vec<bool>>>()?;
    let rows = mc
        .rho_values
        .iter()
        .enumerate()
        .map(|(r, &rho)| {
            let safe = verdicts[r * mc.n..(r + 1) * mc.n].iter().filter(|s| **s).count();
            SafetyRow {
                model: label.to_string(),
                rho,
                safe,
                total: mc.n,
                percentage: 100.0 * safe as f64 / mc.n as f64,
            }
        })
        .collect();
    Ok(SafetyTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApBounds {
    /// Largest gap between the stage cost on realized and on predicted
    /// human-driver states.
    pub epsilon_hat: f64,
    /// Largest distance `‖mean − sample‖` over predicted horizons.
    pub delta_hat: f64,
    pub steps: usize,
}

/// Empirical cost- and observation-prediction residuals on held-out data.
pub fn estimate_ap_bounds<P: EpisodePredictor + ?Sized>(
    model: &P,
    dataset: &Dataset,
    cfg: &ScenarioConfig,
) -> Result<ApBounds> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("AP bounds need a non-empty dataset".into()));
    }
    if dataset.schema != Schema::Merge || !model.variant().is_merge() {
        return Err(Error::Variant("AP bounds need merge-variant data and model".into()));
    }
    dataset.validate()?;
    let h = model.horizon();
    let parts = dataset
        .episodes
        .par_iter()
        .map(|ep| -> Result<(f64, f64, usize)> {
            let preds = model.predict_episode(ep)?;
            let n = trainable_steps(model.variant(), h, ep).min(preds.len());
            let mut eps: f64 = 0.0;
            let mut delta: f64 = 0.0;
            for (t, p) in preds.iter().take(n).enumerate() {
                let (z_hat, v_hat) = match p {
                    HorizonPrediction::Merge { z_hat, v_hat } => (z_hat, v_hat),
                    HorizonPrediction::Ngsim { .. } => unreachable!("merge model"),
                };
                let next = &ep.observations[t + 1].0;
                let x1 = VehicleState::new(next[obs::Z1], next[obs::V1]);
                let u1 = ep.actions[t][0];
                let real = stage_cost(x1, u1, next[obs::Z2], next[obs::V2], cfg);
                let pred = stage_cost(x1, u1, z_hat[0], v_hat[0], cfg);
                eps = eps.max((real - pred).abs());
                let z_true = target_at(crate::ais::Variant::Merge, h, ep, t).unwrap_or_default();
                let mean: Vec<f64> = z_hat.iter().chain(v_hat).copied().collect();
                let d = mean
                    .iter()
                    .zip(&z_true)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                delta = delta.max(d);
            }
            Ok((eps, delta, n))
        })
        .collect::<Result<Vec<_>>>()?;
    let steps: usize = parts.iter().map(|p| p.2).sum();
    if steps == 0 {
        return Err(Error::NoTrainableEpisodes(format!(
            "no episode has the {} steps needed for a full horizon",
            h + 1
        )));
    }
    Ok(ApBounds {
        epsilon_hat: parts.iter().map(|p| p.0).fold(0.0, f64::max),
        delta_hat: parts.iter().map(|p| p.1).fold(0.0, f64::max),
        steps,
    })
}

pub const EPISODE_COLUMNS: [&str; 8] = ["t", "z1", "v1", "u1", "z2", "v2", "u2", "stage_cost"];

/// One row per recorded time point. Row `k` holds the states at `k`, the
/// actions applied from `k` (0 on the last row) and the stage cost incurred on
/// arrival at `k` (0 on the first row).
pub fn episode_csv_string(log: &EpisodeLog, meta: &[(String, String)]) -> String {
    let mut out = String::new();
    for (k, v) in meta {
        let _ = writeln!(out, "# {k}: {v}");
    }
    out.push_str(&EPISODE_COLUMNS.join(","));
    out.push('\n');
    for k in 0..log.len() {
        let c = log.cav.states[k];
        let h = log.hdv.states[k];
        let u1 = log.cav.actions.get(k).copied().unwrap_or(0.0);
        let u2 = log.hdv.actions.get(k).copied().unwrap_or(0.0);
        let cost = if k == 0 { 0.0 } else { log.stage_costs[k - 1] };
        let t = k as f64 * log.cav.dt;
        let _ = writeln!(out, "{t},{},{},{u1},{},{},{u2},{cost}", c.z, c.v, h.z, h.v);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

/// What to write: a single episode or a safety table.
#[derive(Debug, Clone, Copy)]
pub enum Report<'a> {
    Episode(&'a EpisodeLog),
    Table(&'a SafetyTable),
}

/// Writes a report. Episodes support CSV (the time series) and JSON (the
/// full log); tables support JSON and, as CSV, one line per row.
pub fn emit_report(
    report: Report<'_>,
    path: &Path,
    format: ReportFormat,
    meta: &[(String, String)],
) -> Result<()> {
    let text = match (report, format) {
        (Report::Episode(log), ReportFormat::Csv) => episode_csv_string(log, meta),
        (Report::Episode(log), ReportFormat::Json) => {
            let meta: serde_json::Map<String, serde_json::Value> = meta
                .iter()
                .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
                .collect();
            let doc = serde_json::json!({ "meta": meta, "episode": log });
            serde_json::to_string_pretty(&doc).map_err(|e| Error::InvalidInput(e.to_string()))?
        }
        (Report::Table(t), ReportFormat::Json) => t.to_json(meta),
        (Report::Table(t), ReportFormat::Csv) => {
            let mut out = String::new();
            for (k, v) in meta {
                let _ = writeln!(out, "# {k}: {v}");
            }
            out.push_str("model,rho,safe,total,percentage\n");
            for r in &t.rows {
                let _ = writeln!(out, "{},{},{},{},{}", r.model, r.rho, r.safe, r.total, r.percentage);
            }
            out
        }
    };
    crate::write_atomic(path, text.as_bytes())
}
