//! Data generation, trajectory files, the surrogate loss and training.

mod data;
mod generate;

pub use data::{
    load_trajectory_csv, parse_trajectory_csv, Dataset, Episode, EpisodeMeta, GenerationMode,
    Schema, Split, MERGE_COLUMNS, NGSIM_COLUMNS,
};
pub use generate::{
    both_cleared, gap_acceptance_action, generate_dataset, max_steps, run_closed_loop,
    sample_initial, saturate_cav, ClosedLoop, CLEARANCE, GAP_ACCEPT_GAIN, GAP_ACCEPT_HEADWAY,
    MAX_EPISODE_TIME,
};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ais::{ngsim, obs, AisModel, HorizonPrediction, Normalization, Observation, Variant};
use crate::nn::{adam_step, AdamConfig, AdamState, ParamStore, Tape};
use crate::seed::{derive_seed, rng_from_seed, stream};
use crate::{Error, Result};

/// `(x - 2 x_ref)ᵀ x`. Equals `‖x - x_ref‖² - ‖x_ref‖²`, so its gradient in
/// `x` is `2 (x - x_ref)`.
pub fn surrogate_loss(pred_mean: &[f64], sample: &[f64]) -> Result<f64> {
    if pred_mean.len() != sample.len() {
        return Err(Error::Shape(format!(
            "prediction width {} vs sample width {}",
            pred_mean.len(),
            sample.len()
        )));
    }
    Ok(pred_mean
        .iter()
        .zip(sample)
        .map(|(x, r)| (x - 2.0 * r) * x)
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Learning rate at the last epoch as a fraction of the initial one
    /// (cosine schedule).
    pub final_lr_fraction: f64,
    pub seed: u64,
    pub horizon: usize,
    /// Truncated backpropagation window in steps; `None` unrolls the whole
    /// episode. The encoder state is carried across windows either way.
    pub sequence_len: Option<usize>,
    pub validation_fraction: f64,
    /// Episodes per optimizer step.
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 100,
            learning_rate: 1e-2,
            final_lr_fraction: 0.05,
            seed: 0,
            horizon: 10,
            sequence_len: None,
            validation_fraction: 0.2,
            batch_size: 16,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0 < self.final_lr_fraction && self.final_lr_fraction <= 1.0) {
            return bad("final_lr_fraction must be in (0, 1]");
        }
        if self.horizon < 1 {
            return bad("horizon must be at least 1");
        }
        if !(0.0 < self.validation_fraction && self.validation_fraction < 1.0) {
            return bad("validation fraction must be in (0, 1)");
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1");
        }
        if self.sequence_len == Some(0) {
            return bad("sequence length must be at least 1");
        }
        if !(0.0 <= self.beta1 && self.beta1 < 1.0 && 0.0 <= self.beta2 && self.beta2 < 1.0) {
            return bad("Adam betas must be in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("Adam eps must be positive");
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if self.epochs == 1 {
            return self.learning_rate;
        }
        let p = epoch as f64 / (self.epochs - 1) as f64;
        let f = self.final_lr_fraction;
        self.learning_rate * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Losses are per-step means of the surrogate loss shifted by `‖x_ref‖²`,
/// i.e. the squared prediction error summed over the output vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub variant: Variant,
    pub initial_train_loss: f64,
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub train_episodes: usize,
    pub val_episodes: usize,
    pub skipped_episodes: usize,
    pub warnings: Vec<String>,
}

/// Inputs of one trainable step of an episode.
struct StepIo<'a> {
    y: &'a Observation,
    u_prev: Vec<f64>,
    u_dec: Vec<f64>,
    /// `None` once the horizon runs past the episode end.
    target: Option<Vec<f64>>,
}

/// Ground-truth output vector at step `t`, laid out like the decoder output.
pub fn target_at(variant: Variant, horizon: usize, ep: &Episode, t: usize) -> Option<Vec<f64>> {
    match variant {
        Variant::Merge | Variant::MergeLiteral => {
            if t + horizon >= ep.len() {
                return None;
            }
            let fut = &ep.observations[t + 1..=t + horizon];
            let mut out: Vec<f64> = fut.iter().map(|y| y.0[obs::Z2]).collect();
            if variant == Variant::Merge {
                out.extend(fut.iter().map(|y| y.0[obs::V2]));
            }
            Some(out)
        }
        Variant::Ngsim => {
            let y = ep.observations.get(t + 1)?;
            Some(vec![y.0[ngsim::RAMP_LAT], y.0[ngsim::RAMP_LON]])
        }
    }
}

/// Encoder and decoder action inputs at step `t`.
///
/// Merge: the encoder receives the automated vehicle's previous action and
/// the decoder its current one. NGSIM: both receive the three vehicles'
/// previous actions, since the current ones are not observable in advance.
pub fn action_inputs(variant: Variant, ep: &Episode, t: usize) -> (Vec<f64>, Vec<f64>) {
    let prev = ep.prev_actions(t);
    match variant {
        Variant::Merge | Variant::MergeLiteral => {
            let cur = ep.actions.get(t).map_or(0.0, |a| a[0]);
            (vec![prev.first().copied().unwrap_or(0.0)], vec![cur])
        }
        Variant::Ngsim => {
            let prev = if prev.is_empty() { vec![0.0; 3] } else { prev };
            (prev.clone(), prev)
        }
    }
}

fn steps<'a>(variant: Variant, horizon: usize, ep: &'a Episode) -> Vec<StepIo<'a>> {
    (0..ep.len())
        .map(|t| {
            let (u_prev, u_dec) = action_inputs(variant, ep, t);
            StepIo {
                y: &ep.observations[t],
                u_prev,
                u_dec,
                target: target_at(variant, horizon, ep, t),
            }
        })
        .collect()
}

/// Number of steps with a full ground-truth horizon.
pub fn trainable_steps(variant: Variant, horizon: usize, ep: &Episode) -> usize {
    match variant {
        Variant::Ngsim => ep.len().saturating_sub(1),
        _ => ep.len().saturating_sub(horizon),
    }
}

/// Minimum episode length (observations) accepted for training.
pub fn min_episode_len(variant: Variant, horizon: usize) -> usize {
    match variant {
        Variant::Ngsim => 3,
        _ => horizon + 2,
    }
}

struct EpisodeGrad {
    /// Sum over steps of the shifted loss.
    shifted: f64,
    steps: usize,
    grads: Option<ParamStore>,
}

/// Unrolls `model` over `ep`, accumulating the surrogate loss at every step
/// with a full target. With `with_grad` the reverse pass runs per window.
fn episode_loss(
    model: &AisModel,
    ep: &Episode,
    window: Option<usize>,
    with_grad: bool,
) -> Result<EpisodeGrad> {
    let io = steps(model.variant(), model.horizon(), ep);
    let window = window.unwrap_or(io.len()).max(1);
    let mut state = model.init_state().0;
    let mut shifted = 0.0;
    let mut count = 0;
    let mut grads: Option<ParamStore> = None;
    for chunk in io.chunks(window) {
        let mut tape = Tape::new(&model.params);
        let mut s = tape.input(state.clone());
        let mut losses = Vec::new();
        for step in chunk {
            s = model.encode_on_tape(&mut tape, s, step.y, &step.u_prev)?;
            if let Some(target) = &step.target {
                let pred = model.decode_on_tape(&mut tape, s, &step.u_dec)?;
                let l = tape.surrogate_loss(pred, target)?;
                shifted += tape.value(l)[0] + target.iter().map(|r| r * r).sum::<f64>();
                count += 1;
                losses.push(l);
            }
        }
        state = tape.value(s).to_vec();
        if with_grad && !losses.is_empty() {
            let total = tape.sum(&losses)?;
            let g = tape.backward(total)?.params;
            match grads.as_mut() {
                Some(acc) => acc.add_scaled(&g, 1.0)?,
                None => grads = Some(g),
            }
        }
    }
    Ok(EpisodeGrad {
        shifted,
        steps: count,
        grads,
    })
}

/// Mean shifted loss per step over a set of episodes.
fn mean_loss(model: &AisModel, episodes: &[&Episode]) -> Result<f64> {
    let parts = episodes
        .par_iter()
        .map(|ep| episode_loss(model, ep, None, false))
        .collect::<Result<Vec<_>>>()?;
    let (s, n) = parts
        .iter()
        .fold((0.0, 0usize), |(s, n), p| (s + p.shifted, n + p.steps));
    Ok(if n == 0 { 0.0 } else { s / n as f64 })
}

fn mean_std(columns: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    columns
        .iter()
        .map(|c| {
            let n = c.len().max(1) as f64;
            let m = c.iter().sum::<f64>() / n;
            let var = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            (m, if sd > 1e-6 { sd } else { 1.0 })
        })
        .unzip()
}

/// Per-component mean and standard deviation of encoder inputs and targets.
pub fn fit_normalization(variant: Variant, horizon: usize, episodes: &[&Episode]) -> Normalization {
    let d = variant.dims(horizon);
    let mut inputs = vec![Vec::new(); d.obs];
    let mut outputs = vec![Vec::new(); d.dec3.1];
    for ep in episodes {
        for t in 0..ep.len() {
            let (u_prev, _) = action_inputs(variant, ep, t);
            let mut x = ep.observations[t].0.clone();
            for (&slot, &u) in variant.action_slots().iter().zip(&u_prev) {
                x[slot] = u;
            }
            for (col, v) in inputs.iter_mut().zip(x) {
                col.push(v);
            }
            if let Some(target) = target_at(variant, horizon, ep, t) {
                for (col, v) in outputs.iter_mut().zip(target) {
                    col.push(v);
                }
            }
        }
    }
    let (in_mean, in_std) = mean_std(&inputs);
    let (out_mean, out_std) = mean_std(&outputs);
    Normalization {
        in_mean,
        in_std,
        out_mean,
        out_std,
    }
}

/// Splits episode indices into (train, validation), seed-deterministically.
fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(derive_seed(seed, &[stream::SPLIT])));
    if n == 1 {
        return (idx.clone(), idx);
    }
    let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Trains encoder and decoder jointly with Adam on the surrogate loss.
///
/// Episodes shorter than the minimum length are skipped and counted. The
/// returned model is the one with the lowest validation loss seen, including
/// the initialization.
pub fn train(
    dataset: &Dataset,
    variant: Variant,
    config: &TrainConfig,
) -> Result<(AisModel, TrainingReport)> {
    config.validate()?;
    if !dataset.schema.matches(variant) {
        return Err(Error::Variant(format!(
            "{} model cannot train on {:?}-schema data",
            variant.name(),
            dataset.schema
        )));
    }
    dataset.validate()?;
    let horizon = if variant == Variant::Ngsim { 1 } else { config.horizon };
    let min_len = min_episode_len(variant, horizon);
    let usable: Vec<&Episode> = dataset
        .episodes
        .iter()
        .filter(|e| e.len() >= min_len)
        .collect();
    let skipped = dataset.len() - usable.len();
    let mut warnings = Vec::new();
    if skipped > 0 {
        warnings.push(format!(
            "skipped {skipped} episode(s) shorter than {min_len} steps"
        ));
    }
    if usable.is_empty() {
        return Err(Error::NoTrainableEpisodes(format!(
            "all {} episode(s) are shorter than {min_len} steps",
            dataset.len()
        )));
    }
    let dt = usable[0].dt;
    let (train_idx, val_idx) = split_indices(usable.len(), config.validation_fraction, config.seed);
    if usable.len() == 1 {
        warnings.push("single episode: validation reuses the training episode".into());
    }
    let train_set: Vec<&Episode> = train_idx.iter().map(|&i| usable[i]).collect();
    let val_set: Vec<&Episode> = val_idx.iter().map(|&i| usable[i]).collect();

    let mut model = AisModel::new(
        variant,
        horizon,
        dt,
        derive_seed(config.seed, &[stream::INIT_PARAMS]),
    )?;
    model.set_normalization(fit_normalization(variant, horizon, &train_set))?;

    let adam = AdamConfig {
        lr: config.learning_rate,
        beta1: config.beta1,
        beta2: config.beta2,
        eps: config.eps,
    };
    let mut opt = AdamState::new(&model.params, adam);
    let initial_train_loss = mean_loss(&model, &train_set)?;
    let initial_val_loss = mean_loss(&model, &val_set)?;
    let mut best = (initial_val_loss, 0usize, model.params.clone());
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        opt.config.lr = config.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng_from_seed(derive_seed(
            config.seed,
            &[stream::SHUFFLE, epoch as u64],
        )));
        let mut epoch_sum = 0.0;
        let mut epoch_steps = 0usize;
        for batch in order.chunks(config.batch_size) {
            let parts = batch
                .par_iter()
                .map(|&i| episode_loss(&model, train_set[i], config.sequence_len, true))
                .collect::<Result<Vec<_>>>()?;
            let mut total = model.params.zeros_like();
            let mut n = 0usize;
            for p in &parts {
                epoch_sum += p.shifted;
                n += p.steps;
                if let Some(g) = &p.grads {
                    total.add_scaled(g, 1.0)?;
                }
            }
            epoch_steps += n;
            if n == 0 {
                continue;
            }
            total.scale(1.0 / n as f64);
            adam_step(&mut model.params, &total, &mut opt)?;
        }
        if !model.params.all_finite() {
            return Err(Error::Solver(format!("parameters diverged in epoch {}", epoch + 1)));
        }
        let val_loss = mean_loss(&model, &val_set)?;
        let train_loss = epoch_sum / epoch_steps.max(1) as f64;
        history.push(EpochLoss {
            epoch: epoch + 1,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch + 1, model.params.clone());
        }
    }
    model.params = best.2;
    let report = TrainingReport {
        variant,
        initial_train_loss,
        initial_val_loss,
        epochs: history,
        best_epoch: best.1,
        best_val_loss: best.0,
        train_episodes: train_set.len(),
        val_episodes: val_set.len(),
        skipped_episodes: skipped,
        warnings,
    };
    Ok((model, report))
}

/// Anything that can replay an episode and predict at every step.
pub trait EpisodePredictor: Sync {
    fn variant(&self) -> Variant;
    fn horizon(&self) -> usize;
    /// One prediction per step with a full ground-truth horizon, in order.
    fn predict_episode(&self, ep: &Episode) -> Result<Vec<HorizonPrediction>>;
}

impl EpisodePredictor for AisModel {
    fn variant(&self) -> Variant {
        AisModel::variant(self)
    }

    fn horizon(&self) -> usize {
        AisModel::horizon(self)
    }

    /// One prediction per step that has a full ground-truth horizon.
    fn predict_episode(&self, ep: &Episode) -> Result<Vec<HorizonPrediction>> {
        let v = AisModel::variant(self);
        let n = trainable_steps(v, AisModel::horizon(self), ep);
        let mut s = self.init_state();
        let mut out = Vec::with_capacity(n);
        for t in 0..n {
            let (u_prev, u_dec) = action_inputs(v, ep, t);
            s = self.encode(&s, &ep.observations[t], &u_prev)?;
            out.push(self.decode(&s, &u_dec)?);
        }
        Ok(out)
    }
}

/// Test double that "predicts" the recorded future exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleStub {
    pub variant: Variant,
    pub horizon: usize,
}

impl EpisodePredictor for OracleStub {
    fn variant(&self) -> Variant {
        self.variant
    }

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn predict_episode(&self, ep: &Episode) -> Result<Vec<HorizonPrediction>> {
        let n = trainable_steps(self.variant, self.horizon, ep);
        Ok((0..n)
            .map(|t| {
                let fut = &ep.observations[t + 1..];
                match self.variant {
                    Variant::Ngsim => HorizonPrediction::Ngsim {
                        lateral: fut[0].0[ngsim::RAMP_LAT],
                        longitudinal: fut[0].0[ngsim::RAMP_LON],
                    },
                    _ => HorizonPrediction::Merge {
                        z_hat: fut[..self.horizon].iter().map(|y| y.0[obs::Z2]).collect(),
                        v_hat: fut[..self.horizon].iter().map(|y| y.0[obs::V2]).collect(),
                    },
                }
            })
            .collect())
    }
}

/// Prediction errors. Merge: per-horizon-step and aggregate RMSE of
/// positions and speeds. NGSIM: lateral, longitudinal and aggregate (both
/// coordinates pooled) position RMSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub variant: Variant,
    pub horizon: usize,
    pub episodes: usize,
    pub predictions: usize,
    pub position_rmse: f64,
    pub speed_rmse: Option<f64>,
    pub per_step_position_rmse: Vec<f64>,
    pub per_step_speed_rmse: Vec<f64>,
    pub lateral_rmse: Option<f64>,
    pub longitudinal_rmse: Option<f64>,
}

/// Squared-error sums of one episode: per horizon step positions, speeds,
/// then the prediction count.
fn episode_sq_errors<P: EpisodePredictor + ?Sized>(
    model: &P,
    ep: &Episode,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let v = model.variant();
    let h = model.horizon();
    let preds = model.predict_episode(ep)?;
    let mut pos = vec![0.0; h.max(2)];
    let mut spd = vec![0.0; h];
    for (t, p) in preds.iter().enumerate() {
        match p {
            HorizonPrediction::Merge { z_hat, v_hat } => {
                for k in 0..h {
                    let y = &ep.observations[t + 1 + k].0;
                    pos[k] += (z_hat[k] - y[obs::Z2]).powi(2);
                    spd[k] += (v_hat[k] - y[obs::V2]).powi(2);
                }
            }
            HorizonPrediction::Ngsim {
                lateral,
                longitudinal,
            } => {
                let y = &ep.observations[t + 1].0;
                pos[0] += (lateral - y[ngsim::RAMP_LAT]).powi(2);
                pos[1] += (longitudinal - y[ngsim::RAMP_LON]).powi(2);
            }
        }
    }
    if v == Variant::Ngsim {
        pos.truncate(2);
        spd.clear();
    }
    Ok((pos, spd, preds.len()))
}

/// Replays every episode through the predictor and pools squared errors.
/// Per-episode sums are combined in a canonical order, so the result does not
/// depend on episode order.
pub fn evaluate_rmse<P: EpisodePredictor + ?Sized>(
    model: &P,
    dataset: &Dataset,
) -> Result<RmseReport> {
    let variant = model.variant();
    if !dataset.schema.matches(variant) {
        return Err(Error::Variant(format!(
            "{} model cannot be evaluated on {:?}-schema data",
            variant.name(),
            dataset.schema
        )));
    }
    dataset.validate()?;
    let h = model.horizon();
    let min_len = min_episode_len(variant, h);
    let eligible: Vec<&Episode> = dataset.episodes.iter().filter(|e| e.len() >= min_len).collect();
    if eligible.is_empty() {
        return Err(Error::NoTrainableEpisodes(format!(
            "no episode has the {min_len} steps needed for evaluation"
        )));
    }
    let mut parts = eligible
        .par_iter()
        .map(|ep| episode_sq_errors(model, ep))
        .collect::<Result<Vec<_>>>()?;
    parts.sort_by(|a, b| {
        let key = |p: &(Vec<f64>, Vec<f64>, usize)| {
            p.0.iter().chain(&p.1).map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        key(a).cmp(&key(b)).then(a.2.cmp(&b.2))
    });
    let n: usize = parts.iter().map(|p| p.2).sum();
    let width = parts[0].0.len();
    let mut pos = vec![0.0; width];
    let mut spd = vec![0.0; parts[0].1.len()];
    for p in &parts {
        pos.iter_mut().zip(&p.0).for_each(|(a, b)| *a += b);
        spd.iter_mut().zip(&p.1).for_each(|(a, b)| *a += b);
    }
    let nf = n.max(1) as f64;
    let rms = |s: f64, count: f64| (s / count).sqrt();
    let report = if variant == Variant::Ngsim {
        RmseReport {
            variant,
            horizon: h,
            episodes: eligible.len(),
            predictions: n,
            position_rmse: rms(pos[0] + pos[1], 2.0 * nf),
            speed_rmse: None,
            per_step_position_rmse: vec![rms(pos[0] + pos[1], 2.0 * nf)],
            per_step_speed_rmse: Vec::new(),
            lateral_rmse: Some(rms(pos[0], nf)),
            longitudinal_rmse: Some(rms(pos[1], nf)),
        }
    } else {
        RmseReport {
            variant,
            horizon: h,
            episodes: eligible.len(),
            predictions: n,
            position_rmse: rms(pos[..h].iter().sum(), nf * h as f64),
            speed_rmse: Some(rms(spd.iter().sum(), nf * h as f64)),
            per_step_position_rmse: pos[..h].iter().map(|s| rms(*s, nf)).collect(),
            per_step_speed_rmse: spd.iter().map(|s| rms(*s, nf)).collect(),
            lateral_rmse: None,
            longitudinal_rmse: None,
        }
    };
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::StyleRange;
    use crate::dynamics::ScenarioConfig;
    use proptest::prelude::*;

    #[test]
    fn surrogate_examples() {
        assert_eq!(surrogate_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), -5.0);
        assert_eq!(surrogate_loss(&[0.0, 0.0, 0.0], &[3.0, -1.0, 9.0]).unwrap(), 0.0);
        assert_eq!(surrogate_loss(&[2.0, 2.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(surrogate_loss(&[1.0], &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn surrogate_shifted_is_squared_distance(
            pairs in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 1..30)
        ) {
            let (x, r): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let lhs = surrogate_loss(&x, &r).unwrap() + r.iter().map(|v| v * v).sum::<f64>();
            let rhs: f64 = x.iter().zip(&r).map(|(a, b)| (a - b).powi(2)).sum();
            prop_assert!(rhs >= 0.0);
            prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.max(r.iter().map(|v| v * v).sum::<f64>()).max(1.0));
        }
    }

    #[test]
    fn surrogate_gradient_is_twice_the_residual() {
        let store = ParamStore::new();
        let x = vec![0.3, -1.7, 4.0];
        let r = vec![1.0, 2.0, -0.5];
        let mut tape = Tape::new(&store);
        let xi = tape.input(x.clone());
        let l = tape.surrogate_loss(xi, &r).unwrap();
        let g = tape.backward(l).unwrap();
        for ((gi, a), b) in g.wrt(xi).iter().zip(&x).zip(&r) {
            assert!((gi - 2.0 * (a - b)).abs() < 1e-12);
        }
    }

    fn constant_accel_dataset(n: usize) -> Dataset {
        // the human driver ignores the automated vehicle: fixed acceleration
        let episodes = (0..n)
            .map(|i| {
                let a = -0.5 + 0.1 * (i % 7) as f64;
                let dt = 0.2;
                let mut cav = vec![(0.0, 10.0)];
                let mut hdv = vec![(-5.0 + i as f64 % 5.0, 9.0 + (i % 3) as f64)];
                let mut acts = Vec::new();
                for _ in 0..25 {
                    let (z, v) = *cav.last().unwrap();
                    cav.push((z + dt * v, v));
                    let (z, v) = *hdv.last().unwrap();
                    hdv.push((z + dt * v + 0.5 * dt * dt * a, v + dt * a));
                    acts.push([0.0, a]);
                }
                Episode::from_merge_states(i.to_string(), &cav, &hdv, acts, dt, EpisodeMeta::default())
            })
            .collect();
        Dataset::new(Schema::Merge, episodes)
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            epochs: 15,
            learning_rate: 1e-2,
            horizon: 5,
            batch_size: 4,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_reduces_loss_on_learnable_system() {
        let d = constant_accel_dataset(20);
        let (_, report) = train(&d, Variant::Merge, &quick_config()).unwrap();
        assert!(report.best_val_loss < report.initial_val_loss, "{report:?}");
        assert!(report.best_val_loss < 0.5 * report.initial_val_loss, "{report:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let d = constant_accel_dataset(10);
        let mut c = quick_config();
        c.epochs = 3;
        let (a, ra) = train(&d, Variant::Merge, &c).unwrap();
        let (b, rb) = train(&d, Variant::Merge, &c).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn truncated_windows_also_train() {
        let d = constant_accel_dataset(10);
        let mut c = quick_config();
        c.sequence_len = Some(6);
        let (_, r) = train(&d, Variant::Merge, &c).unwrap();
        assert!(r.best_val_loss < r.initial_val_loss);
    }

    #[test]
    fn config_and_data_rejections() {
        let d = constant_accel_dataset(4);
        let mut c = quick_config();
        c.epochs = 0;
        assert!(matches!(train(&d, Variant::Merge, &c), Err(Error::InvalidConfig(_))));
        let mut short = d.clone();
        for e in &mut short.episodes {
            e.observations.truncate(5);
            e.actions.truncate(4);
        }
        assert!(matches!(
            train(&short, Variant::Merge, &quick_config()),
            Err(Error::NoTrainableEpisodes(_))
        ));
        assert!(matches!(train(&d, Variant::Ngsim, &quick_config()), Err(Error::Variant(_))));
    }

    #[test]
    fn short_episodes_are_skipped_and_counted() {
        let mut d = constant_accel_dataset(6);
        d.episodes[0].observations.truncate(5);
        d.episodes[0].actions.truncate(4);
        let mut c = quick_config();
        c.epochs = 1;
        let (_, r) = train(&d, Variant::Merge, &c).unwrap();
        assert_eq!(r.skipped_episodes, 1);
        assert_eq!(r.train_episodes + r.val_episodes, 5);
    }

    #[test]
    fn oracle_rmse_is_zero() {
        let d = generate_dataset(
            GenerationMode::Safe,
            5,
            1,
            &ScenarioConfig::default(),
            &StyleRange::default(),
        )
        .unwrap();
        let r = evaluate_rmse(&OracleStub { variant: Variant::Merge, horizon: 10 }, &d).unwrap();
        assert_eq!(r.position_rmse, 0.0);
        assert_eq!(r.speed_rmse, Some(0.0));
        assert_eq!(r.per_step_position_rmse.len(), 10);
    }

    #[test]
    fn zero_model_rmse_is_rms_of_reference() {
        let d = constant_accel_dataset(3);
        let h = 4;
        let m = AisModel::zeros(Variant::Merge, h, 0.2).unwrap();
        let r = evaluate_rmse(&m, &d).unwrap();
        let mut sq = 0.0;
        let mut n = 0;
        for e in &d.episodes {
            let z = e.column(obs::Z2);
            for t in 0..e.len() - h {
                for k in 1..=h {
                    sq += z[t + k] * z[t + k];
                    n += 1;
                }
            }
        }
        assert!((r.position_rmse - (sq / n as f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rmse_ignores_episode_order() {
        let d = constant_accel_dataset(6);
        let m = AisModel::new(Variant::Merge, 5, 0.2, 4).unwrap();
        let a = evaluate_rmse(&m, &d).unwrap();
        let mut rev = d.clone();
        rev.episodes.reverse();
        let b = evaluate_rmse(&m, &rev).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rmse_rejects_schema_mismatch() {
        let d = constant_accel_dataset(2);
        let m = OracleStub { variant: Variant::Ngsim, horizon: 1 };
        assert!(matches!(evaluate_rmse(&m, &d), Err(Error::Variant(_))));
    }
}
