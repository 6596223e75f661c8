//! Closed-loop data generation.

use rand::Rng;
use rayon::prelude::*;

use super::data::{Dataset, Episode, EpisodeMeta, GenerationMode, Schema};
use crate::driver::{hdv_action, sample_irl_weights, step_hdv, IrlWeights, StyleRange};
use crate::dynamics::{step_unchecked, ScenarioConfig, VehicleState};
use crate::seed::{derive_seed, rng_from_seed, stream};
use crate::{Error, Result};

/// Arrival-time gap below which the gap-acceptance controller yields, s.
pub const GAP_ACCEPT_HEADWAY: f64 = 1.5;
/// Proportional speed-tracking gain of the gap-acceptance controller, 1/s.
pub const GAP_ACCEPT_GAIN: f64 = 0.5;
/// Episodes end once both vehicles are this far past the conflict point, m.
pub const CLEARANCE: f64 = 10.0;
/// Episode duration cap, s.
pub const MAX_EPISODE_TIME: f64 = 60.0;

/// Initial positions and speeds for a seeded episode.
pub fn sample_initial(seed: u64) -> (VehicleState, VehicleState) {
    let mut rng = rng_from_seed(seed);
    let mut draw = || {
        let z = rng.gen_range(-10.0..=10.0);
        let v = rng.gen_range(8.0..=12.0);
        VehicleState::new(z, v)
    };
    let cav = draw();
    let hdv = draw();
    (cav, hdv)
}

pub fn max_steps(cfg: &ScenarioConfig) -> usize {
    (MAX_EPISODE_TIME / cfg.dt).round() as usize
}

pub fn both_cleared(cav: VehicleState, hdv: VehicleState, cfg: &ScenarioConfig) -> bool {
    cav.z > cfg.z_c + CLEARANCE && hdv.z > cfg.z_c + CLEARANCE
}

/// Limits a requested acceleration to the actuator bounds and to what keeps
/// the next speed inside `[v_min, v_max]`.
pub fn saturate_cav(u: f64, v: f64, cfg: &ScenarioConfig) -> f64 {
    let lo = cfg.u_min.max((cfg.v_min - v) / cfg.dt);
    let hi = cfg.u_max.min((cfg.v_max - v) / cfg.dt);
    if lo > hi {
        // speed already outside its bounds; push back as hard as allowed
        return if v > cfg.v_max { cfg.u_min } else { cfg.u_max };
    }
    u.clamp(lo, hi)
}

fn arrival_time(x: VehicleState, z_c: f64) -> Option<f64> {
    if x.z >= z_c {
        None
    } else if x.v <= 1e-6 {
        Some(f64::INFINITY)
    } else {
        Some((z_c - x.z) / x.v)
    }
}

/// Rule-based yielding controller: if the two arrival times at the conflict
/// point are closer than [`GAP_ACCEPT_HEADWAY`], track the speed that arrives
/// that long after the human driver; otherwise track `v_max`.
pub fn gap_acceptance_action(cav: VehicleState, hdv: VehicleState, cfg: &ScenarioConfig) -> f64 {
    let mut target = cfg.v_max;
    if let (Some(t_cav), Some(t_hdv)) = (arrival_time(cav, cfg.z_c), arrival_time(hdv, cfg.z_c)) {
        if t_hdv.is_finite() && (t_cav - t_hdv).abs() < GAP_ACCEPT_HEADWAY {
            target = (cfg.z_c - cav.z) / (t_hdv + GAP_ACCEPT_HEADWAY);
        }
    }
    let target = target.clamp(cfg.v_min, cfg.v_max);
    (GAP_ACCEPT_GAIN * (target - cav.v)).clamp(cfg.u_min, cfg.u_max)
}

/// States and applied actions of one closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoop {
    pub cav: Vec<VehicleState>,
    pub hdv: Vec<VehicleState>,
    pub actions: Vec<[f64; 2]>,
    pub capped: bool,
}

/// Runs both vehicles from `init` until both clear the conflict point or the
/// step cap. `policy(t, cav, hdv, prev)` returns the automated vehicle's
/// requested acceleration, which is then saturated; `prev` holds the actions
/// applied at the previous step (zeros at first).
pub fn run_closed_loop<F>(
    init: (VehicleState, VehicleState),
    hdv_weights: &IrlWeights,
    cfg: &ScenarioConfig,
    mut policy: F,
) -> Result<ClosedLoop>
where
    F: FnMut(usize, VehicleState, VehicleState, [f64; 2]) -> Result<f64>,
{
    let (mut cav, mut hdv) = init;
    if !cav.is_finite() || !hdv.is_finite() {
        return Err(Error::InvalidInput("non-finite initial state".into()));
    }
    let cap = max_steps(cfg);
    let mut out = ClosedLoop {
        cav: vec![cav],
        hdv: vec![hdv],
        actions: Vec::new(),
        capped: false,
    };
    for t in 0..cap {
        if both_cleared(cav, hdv, cfg) {
            return Ok(out);
        }
        let prev = out.actions.last().copied().unwrap_or([0.0, 0.0]);
        let u1 = saturate_cav(policy(t, cav, hdv, prev)?, cav.v, cfg);
        let (hdv_next, u2) = step_hdv(hdv, cav, hdv_weights, cfg)?;
        cav = step_unchecked(cav, u1, cfg.dt);
        // rounding can leave the speed a hair outside its bounds
        cav.v = cav.v.clamp(cfg.v_min, cfg.v_max);
        hdv = hdv_next;
        out.cav.push(cav);
        out.hdv.push(hdv);
        out.actions.push([u1, u2]);
    }
    out.capped = !both_cleared(cav, hdv, cfg);
    Ok(out)
}

fn generate_episode(
    mode: GenerationMode,
    index: usize,
    seed: u64,
    cfg: &ScenarioConfig,
    range: &StyleRange,
) -> Result<Episode> {
    let ep_seed = derive_seed(seed, &[stream::EPISODE, index as u64]);
    let hdv_w = sample_irl_weights(derive_seed(ep_seed, &[stream::HDV_WEIGHTS]), range)?;
    let init = sample_initial(derive_seed(ep_seed, &[stream::INITIAL]));
    let (run, cav_w) = match mode {
        GenerationMode::Safe => {
            let run = run_closed_loop(init, &hdv_w, cfg, |_, c, h, _| {
                Ok(gap_acceptance_action(c, h, cfg))
            })?;
            (run, None)
        }
        GenerationMode::Exploratory => {
            let cav_w = sample_irl_weights(derive_seed(ep_seed, &[stream::CAV_WEIGHTS]), range)?;
            let run = run_closed_loop(init, &hdv_w, cfg, |_, c, h, _| {
                Ok(hdv_action(c, h, &cav_w, cfg))
            })?;
            (run, Some(cav_w))
        }
    };
    let cav: Vec<(f64, f64)> = run.cav.iter().map(|x| (x.z, x.v)).collect();
    let hdv: Vec<(f64, f64)> = run.hdv.iter().map(|x| (x.z, x.v)).collect();
    Ok(Episode::from_merge_states(
        index.to_string(),
        &cav,
        &hdv,
        run.actions,
        cfg.dt,
        EpisodeMeta {
            seed: Some(ep_seed),
            mode: Some(mode),
            hdv_weights: Some(hdv_w),
            cav_weights: cav_w,
            capped: run.capped,
        },
    ))
}

/// Simulated merge episodes.
///
/// Safe mode drives the automated vehicle with [`gap_acceptance_action`];
/// exploratory mode drives it with its own randomly weighted driver model.
/// Episodes run in parallel; each one depends only on `(seed, index)`.
pub fn generate_dataset(
    mode: GenerationMode,
    n_episodes: usize,
    seed: u64,
    cfg: &ScenarioConfig,
    range: &StyleRange,
) -> Result<Dataset> {
    if n_episodes == 0 {
        return Err(Error::InvalidConfig("n_episodes must be at least 1".into()));
    }
    cfg.validate()?;
    range.validate()?;
    let episodes = (0..n_episodes)
        .into_par_iter()
        .map(|i| generate_episode(mode, i, seed, cfg, range))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(Schema::Merge, episodes))
}
