//! Approximate-information-state model.
//!
//! The encoder compresses the observation history into a fixed-width state
//! `s_t = ψ(s_{t-1}, y_t, u_{t-1})` (dense, ReLU, dense, ReLU, GRU). The
//! decoder maps `(s_t, u_t)` to the mean of a unit-variance normal over the
//! human driver's future (dense, ReLU, dense, ReLU, dense).
//!
//! Layer widths per variant:
//!
//! | variant          | encoder          | GRU | decoder                     |
//! |------------------|------------------|-----|-----------------------------|
//! | `merge`          | 6→8, 8→16        | 4   | 5→2, 2→4, 4→2H (ẑ then v̂)  |
//! | `merge-literal`  | 6→8, 8→16        | 4   | 5→2, 2→4, 4→H (ẑ only)     |
//! | `ngsim`          | 9→8, 8→16        | 24  | 27→32, 32→64, 64→2          |
//!
//! Inputs and outputs pass through fixed affine normalizations estimated from
//! training data; they are stored with the model but never trained.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::{DenseLayer, GruCell, NamedArray, ParamStore, Tape, ValueId};
use crate::seed::rng_from_seed;
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Merge scenario, decoder emits H positions then H speeds.
    Merge,
    /// Merge scenario, decoder emits H positions; speeds by finite differences.
    MergeLiteral,
    /// Ramp vehicle plus two highway vehicles, one-step position prediction.
    Ngsim,
}

impl Variant {
    pub fn obs_width(self) -> usize {
        match self {
            Variant::Merge | Variant::MergeLiteral => 6,
            Variant::Ngsim => 9,
        }
    }

    pub fn action_width(self) -> usize {
        match self {
            Variant::Merge | Variant::MergeLiteral => 1,
            Variant::Ngsim => 3,
        }
    }

    pub fn hidden_width(self) -> usize {
        match self {
            Variant::Merge | Variant::MergeLiteral => 4,
            Variant::Ngsim => 24,
        }
    }

    pub fn is_merge(self) -> bool {
        matches!(self, Variant::Merge | Variant::MergeLiteral)
    }

    /// Width of the decoder output (and of the training target).
    pub fn output_width(self, horizon: usize) -> usize {
        match self {
            Variant::Merge => 2 * horizon,
            Variant::MergeLiteral => horizon,
            Variant::Ngsim => 2,
        }
    }

    /// Positions of the action slots inside the observation vector.
    pub fn action_slots(self) -> &'static [usize] {
        match self {
            Variant::Merge | Variant::MergeLiteral => &[obs::U1_PREV],
            Variant::Ngsim => &[ngsim::RAMP_A, ngsim::LEAD_A, ngsim::LAG_A],
        }
    }

    pub fn dims(self, horizon: usize) -> Dims {
        let (hidden, dec_hidden) = match self {
            Variant::Ngsim => (24, (32, 64)),
            _ => (4, (2, 4)),
        };
        let obs = self.obs_width();
        let act = self.action_width();
        Dims {
            obs,
            act,
            enc1: (obs, 8),
            enc2: (8, 16),
            gru_hidden: hidden,
            dec1: (hidden + act, dec_hidden.0),
            dec2: dec_hidden,
            dec3: (dec_hidden.1, self.output_width(horizon)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Merge => "merge",
            Variant::MergeLiteral => "merge-literal",
            Variant::Ngsim => "ngsim",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "merge" => Ok(Variant::Merge),
            "merge-literal" => Ok(Variant::MergeLiteral),
            "ngsim" => Ok(Variant::Ngsim),
            other => Err(Error::InvalidInput(format!("unknown model variant `{other}`"))),
        }
    }
}

/// Observation slots of the merge variant.
pub mod obs {
    pub const Z1: usize = 0;
    pub const V1: usize = 1;
    pub const U1_PREV: usize = 2;
    pub const Z2: usize = 3;
    pub const V2: usize = 4;
    pub const U2_PREV: usize = 5;
}

/// Observation slots of the NGSIM variant.
pub mod ngsim {
    pub const RAMP_LAT: usize = 0;
    pub const RAMP_LON: usize = 1;
    pub const RAMP_A: usize = 2;
    pub const LEAD_Z: usize = 3;
    pub const LEAD_V: usize = 4;
    pub const LEAD_A: usize = 5;
    pub const LAG_Z: usize = 6;
    pub const LAG_V: usize = 7;
    pub const LAG_A: usize = 8;
}

/// Joint observation received at one time step.
///
/// Merge layout: `(z1, v1, u1_prev, z2, v2, u2_prev)`.
/// NGSIM layout: `(ramp lat, ramp lon, ramp action, lead z, lead v, lead a,
/// lag z, lag v, lag a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn merge(z1: f64, v1: f64, u1_prev: f64, z2: f64, v2: f64, u2_prev: f64) -> Self {
        Self(vec![z1, v1, u1_prev, z2, v2, u2_prev])
    }

    pub fn ngsim(fields: [f64; 9]) -> Self {
        Self(fields.to_vec())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AisState(pub Vec<f64>);

impl AisState {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Mean of the decoder's predictive distribution (its variance is fixed at 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HorizonPrediction {
    /// Human driver's positions and speeds at `t+1 .. t+H`.
    Merge { z_hat: Vec<f64>, v_hat: Vec<f64> },
    /// Ramp vehicle's next-step position.
    Ngsim { lateral: f64, longitudinal: f64 },
}

impl HorizonPrediction {
    pub fn z_hat(&self) -> &[f64] {
        match self {
            HorizonPrediction::Merge { z_hat, .. } => z_hat,
            HorizonPrediction::Ngsim { .. } => &[],
        }
    }

    pub fn v_hat(&self) -> &[f64] {
        match self {
            HorizonPrediction::Merge { v_hat, .. } => v_hat,
            HorizonPrediction::Ngsim { .. } => &[],
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            HorizonPrediction::Merge { z_hat, v_hat } => {
                z_hat.iter().chain(v_hat).all(|x| x.is_finite())
            }
            HorizonPrediction::Ngsim {
                lateral,
                longitudinal,
            } => lateral.is_finite() && longitudinal.is_finite(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub obs: usize,
    pub act: usize,
    pub enc1: (usize, usize),
    pub enc2: (usize, usize),
    pub gru_hidden: usize,
    pub dec1: (usize, usize),
    pub dec2: (usize, usize),
    pub dec3: (usize, usize),
}

/// Fixed affine maps: encoder input `(x - in_mean) / in_std`, decoder output
/// `out_mean + out_std * raw`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub in_mean: Vec<f64>,
    pub in_std: Vec<f64>,
    pub out_mean: Vec<f64>,
    pub out_std: Vec<f64>,
}

impl Normalization {
    pub fn identity(obs: usize, out: usize) -> Self {
        Self {
            in_mean: vec![0.0; obs],
            in_std: vec![1.0; obs],
            out_mean: vec![0.0; out],
            out_std: vec![1.0; out],
        }
    }

    fn validate(&self, dims: &Dims) -> Result<()> {
        if self.in_mean.len() != dims.obs
            || self.in_std.len() != dims.obs
            || self.out_mean.len() != dims.dec3.1
            || self.out_std.len() != dims.dec3.1
        {
            return Err(Error::Dimension("normalization widths do not match the model".into()));
        }
        let all = self
            .in_mean
            .iter()
            .chain(&self.out_mean)
            .all(|x| x.is_finite())
            && self
                .in_std
                .iter()
                .chain(&self.out_std)
                .all(|s| s.is_finite() && *s > 0.0);
        if !all {
            return Err(Error::Malformed("normalization values must be finite, std > 0".into()));
        }
        Ok(())
    }

    fn in_scale(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = self.in_std.iter().map(|s| 1.0 / s).collect();
        let offset = self
            .in_mean
            .iter()
            .zip(&scale)
            .map(|(m, s)| -m * s)
            .collect();
        (scale, offset)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AisModel {
    variant: Variant,
    horizon: usize,
    dt: f64,
    pub params: ParamStore,
    norm: Normalization,
    enc1: DenseLayer,
    enc2: DenseLayer,
    gru: GruCell,
    dec1: DenseLayer,
    dec2: DenseLayer,
    dec3: DenseLayer,
}

impl AisModel {
    /// Fresh model with seeded uniform weights, zero biases and identity
    /// normalization.
    pub fn new(variant: Variant, horizon: usize, dt: f64, seed: u64) -> Result<Self> {
        if variant == Variant::Ngsim && horizon != 1 {
            return Err(Error::InvalidConfig("the NGSIM variant predicts one step (H = 1)".into()));
        }
        if variant == Variant::MergeLiteral && horizon < 2 {
            return Err(Error::InvalidConfig(
                "the literal merge variant needs H >= 2 to difference speeds".into(),
            ));
        }
        if horizon < 1 || !(dt > 0.0) {
            return Err(Error::InvalidConfig("horizon >= 1 and dt > 0 required".into()));
        }
        let d = variant.dims(horizon);
        let mut rng = rng_from_seed(seed);
        let mut p = ParamStore::new();
        let enc1 = DenseLayer::new(&mut p, "encoder.fc1", d.enc1.0, d.enc1.1, &mut rng)?;
        let enc2 = DenseLayer::new(&mut p, "encoder.fc2", d.enc2.0, d.enc2.1, &mut rng)?;
        let gru = GruCell::new(&mut p, "encoder.gru", d.enc2.1, d.gru_hidden, &mut rng)?;
        let dec1 = DenseLayer::new(&mut p, "decoder.fc1", d.dec1.0, d.dec1.1, &mut rng)?;
        let dec2 = DenseLayer::new(&mut p, "decoder.fc2", d.dec2.0, d.dec2.1, &mut rng)?;
        let dec3 = DenseLayer::new(&mut p, "decoder.fc3", d.dec3.0, d.dec3.1, &mut rng)?;
        Ok(Self {
            variant,
            horizon,
            dt,
            params: p,
            norm: Normalization::identity(d.obs, d.dec3.1),
            enc1,
            enc2,
            gru,
            dec1,
            dec2,
            dec3,
        })
    }

    /// Model with every parameter zero and identity normalization.
    pub fn zeros(variant: Variant, horizon: usize, dt: f64) -> Result<Self> {
        let mut m = Self::new(variant, horizon, dt, 0)?;
        for a in m.params.arrays_mut() {
            a.data.iter_mut().for_each(|x| *x = 0.0);
        }
        Ok(m)
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dims(&self) -> Dims {
        self.variant.dims(self.horizon)
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn set_normalization(&mut self, norm: Normalization) -> Result<()> {
        norm.validate(&self.dims())?;
        self.norm = norm;
        Ok(())
    }

    /// `s_0`: zeros of the hidden width.
    pub fn init_state(&self) -> AisState {
        AisState(vec![0.0; self.variant.hidden_width()])
    }

    /// Encoder input: the observation with its action slots taken from
    /// `u_prev` (merge: the automated vehicle's previous action; NGSIM: the
    /// three vehicles' previous actions in slot order).
    pub fn pack_input(&self, y: &Observation, u_prev: &[f64]) -> Result<Vec<f64>> {
        let v = self.variant;
        if y.0.len() != v.obs_width() {
            return Err(Error::Shape(format!(
                "{} observation must have width {}, got {}",
                v.name(),
                v.obs_width(),
                y.0.len()
            )));
        }
        if u_prev.len() != v.action_width() {
            return Err(Error::Shape(format!(
                "{} encoder expects {} previous action(s), got {}",
                v.name(),
                v.action_width(),
                u_prev.len()
            )));
        }
        let mut x = y.0.clone();
        for (&slot, &u) in v.action_slots().iter().zip(u_prev) {
            x[slot] = u;
        }
        Ok(x)
    }

    /// Records one encoder update on `tape`.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape<'_>,
        s_prev: ValueId,
        y: &Observation,
        u_prev: &[f64],
    ) -> Result<ValueId> {
        let x = self.pack_input(y, u_prev)?;
        let (scale, offset) = self.norm.in_scale();
        let x = tape.input(x);
        let x = tape.affine(x, &scale, &offset)?;
        let a = tape.dense(&self.enc1, x)?;
        let a = tape.relu(a)?;
        let b = tape.dense(&self.enc2, a)?;
        let b = tape.relu(b)?;
        tape.gru(&self.gru, b, s_prev)
    }

    /// Records one decoder evaluation; the returned value is the physical
    /// output vector (see [`Variant::output_width`]).
    pub fn decode_on_tape(&self, tape: &mut Tape<'_>, s: ValueId, u: &[f64]) -> Result<ValueId> {
        if u.len() != self.variant.action_width() {
            return Err(Error::Shape(format!(
                "{} decoder expects {} action(s), got {}",
                self.variant.name(),
                self.variant.action_width(),
                u.len()
            )));
        }
        let u = tape.input(u.to_vec());
        let x = tape.concat(&[s, u])?;
        let a = tape.dense(&self.dec1, x)?;
        let a = tape.relu(a)?;
        let b = tape.dense(&self.dec2, a)?;
        let b = tape.relu(b)?;
        let raw = tape.dense(&self.dec3, b)?;
        tape.affine(raw, &self.norm.out_std, &self.norm.out_mean)
    }

    pub fn encode(&self, s_prev: &AisState, y: &Observation, u_prev: &[f64]) -> Result<AisState> {
        if s_prev.0.len() != self.variant.hidden_width() {
            return Err(Error::Shape(format!(
                "state width {} does not match hidden width {}",
                s_prev.0.len(),
                self.variant.hidden_width()
            )));
        }
        let mut tape = Tape::new(&self.params);
        let s = tape.input(s_prev.0.clone());
        let out = self.encode_on_tape(&mut tape, s, y, u_prev)?;
        Ok(AisState(tape.value(out).to_vec()))
    }

    /// Raw decoder output in physical units.
    pub fn decode_vec(&self, s: &AisState, u: &[f64]) -> Result<Vec<f64>> {
        if s.0.len() != self.variant.hidden_width() {
            return Err(Error::Shape(format!(
                "state width {} does not match hidden width {}",
                s.0.len(),
                self.variant.hidden_width()
            )));
        }
        let mut tape = Tape::new(&self.params);
        let si = tape.input(s.0.clone());
        let out = self.decode_on_tape(&mut tape, si, u)?;
        Ok(tape.value(out).to_vec())
    }

    pub fn decode(&self, s: &AisState, u: &[f64]) -> Result<HorizonPrediction> {
        let out = self.decode_vec(s, u)?;
        Ok(self.to_prediction(&out))
    }

    /// Interprets a physical output vector as a prediction.
    pub fn to_prediction(&self, out: &[f64]) -> HorizonPrediction {
        prediction_from_output(self.variant, self.horizon, self.dt, out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json()?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format_version: FORMAT_VERSION,
            variant: self.variant,
            horizon: self.horizon,
            dt: self.dt,
            dims: self.dims(),
            normalization: self.norm.clone(),
            params: self.params.arrays().to_vec(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Malformed(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        // version first, so that future layouts report the right error
        let header: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
        let found = header
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Malformed("missing `format_version`".into()))?;
        if found != FORMAT_VERSION as u64 {
            return Err(Error::Version {
                found: found as u32,
                expected: FORMAT_VERSION,
            });
        }
        let file: ModelFile =
            serde_json::from_value(header).map_err(|e| Error::Malformed(e.to_string()))?;
        let mut model = Self::new(file.variant, file.horizon, file.dt, 0)?;
        let expected = model.dims();
        if file.dims != expected {
            return Err(Error::Dimension(format!(
                "file declares {:?}, variant {} with H = {} requires {:?}",
                file.dims,
                file.variant.name(),
                file.horizon,
                expected
            )));
        }
        for a in &file.params {
            let n: usize = a.shape.iter().product();
            if n != a.data.len() {
                return Err(Error::Dimension(format!(
                    "parameter `{}` declares shape {:?} but holds {} values",
                    a.name,
                    a.shape,
                    a.data.len()
                )));
            }
        }
        let store = ParamStore::from_arrays(file.params);
        // binding checks names and shapes against the architecture
        let d = expected;
        model.enc1 = DenseLayer::bind(&store, "encoder.fc1", d.enc1.0, d.enc1.1)?;
        model.enc2 = DenseLayer::bind(&store, "encoder.fc2", d.enc2.0, d.enc2.1)?;
        model.gru = GruCell::bind(&store, "encoder.gru", d.enc2.1, d.gru_hidden)?;
        model.dec1 = DenseLayer::bind(&store, "decoder.fc1", d.dec1.0, d.dec1.1)?;
        model.dec2 = DenseLayer::bind(&store, "decoder.fc2", d.dec2.0, d.dec2.1)?;
        model.dec3 = DenseLayer::bind(&store, "decoder.fc3", d.dec3.0, d.dec3.1)?;
        if store.num_scalars() != model.params.num_scalars() || store.len() != model.params.len() {
            return Err(Error::Dimension("unexpected extra parameters in model file".into()));
        }
        if !store.all_finite() {
            return Err(Error::Malformed("non-finite parameter values".into()));
        }
        model.params = store;
        file.normalization.validate(&d)?;
        model.norm = file.normalization;
        Ok(model)
    }
}

pub(crate) fn prediction_from_output(
    variant: Variant,
    horizon: usize,
    dt: f64,
    out: &[f64],
) -> HorizonPrediction {
    match variant {
        Variant::Merge => HorizonPrediction::Merge {
            z_hat: out[..horizon].to_vec(),
            v_hat: out[horizon..2 * horizon].to_vec(),
        },
        Variant::MergeLiteral => {
            let z_hat = out[..horizon].to_vec();
            let mut v_hat: Vec<f64> = Vec::with_capacity(horizon);
            for k in 0..horizon {
                let v = if k == 0 {
                    (z_hat[1] - z_hat[0]) / dt
                } else {
                    (z_hat[k] - z_hat[k - 1]) / dt
                };
                v_hat.push(v);
            }
            HorizonPrediction::Merge { z_hat, v_hat }
        }
        Variant::Ngsim => HorizonPrediction::Ngsim {
            lateral: out[0],
            longitudinal: out[1],
        },
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    variant: Variant,
    horizon: usize,
    dt: f64,
    dims: Dims,
    normalization: Normalization,
    params: Vec<NamedArray>,
}
