//! Episodes, datasets and the trajectory CSV format.
//!
//! Merge schema: `episode_id,t,z1,v1,u1,z2,v2,u2`.
//! NGSIM schema: `episode_id,t,z_ramp_lat,z_ramp_lon,v_ramp,a_ramp,z_lead,v_lead,a_lead,z_lag,v_lag,a_lag`.
//!
//! Row `t` holds the vehicle states at `t` and the actions applied from `t` to
//! `t + dt`. The last row of an episode has no successor, so its actions are
//! written as 0 and ignored when reading. Lines starting with `#` are metadata
//! comments.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ais::{ngsim, obs, Observation, Variant};
use crate::driver::IrlWeights;
use crate::{Error, Result};

pub const MERGE_COLUMNS: [&str; 8] = ["episode_id", "t", "z1", "v1", "u1", "z2", "v2", "u2"];

pub const NGSIM_COLUMNS: [&str; 12] = [
    "episode_id",
    "t",
    "z_ramp_lat",
    "z_ramp_lon",
    "v_ramp",
    "a_ramp",
    "z_lead",
    "v_lead",
    "a_lead",
    "z_lag",
    "v_lag",
    "a_lag",
];

const DT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    Merge,
    Ngsim,
}

impl Schema {
    pub fn matches(self, variant: Variant) -> bool {
        variant.is_merge() == (self == Schema::Merge)
    }

    pub fn action_width(self) -> usize {
        match self {
            Schema::Merge => 2,
            Schema::Ngsim => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenerationMode {
    Safe,
    Exploratory,
}

impl std::str::FromStr for GenerationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "safe" => Ok(GenerationMode::Safe),
            "exploratory" => Ok(GenerationMode::Exploratory),
            other => Err(Error::InvalidInput(format!("unknown generation mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub seed: Option<u64>,
    pub mode: Option<GenerationMode>,
    pub hdv_weights: Option<IrlWeights>,
    pub cav_weights: Option<IrlWeights>,
    /// Episode stopped at the step cap rather than by both vehicles clearing
    /// the conflict point.
    pub capped: bool,
}

/// One recorded run.
///
/// `observations[t]` carries the previous step's actions in its action slots
/// (zeros at `t = 0`). `actions[t]` is what each vehicle applied from `t` to
/// `t + 1`: `[cav, hdv]` for the merge schema, `[ramp, lead, lag]` for NGSIM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub observations: Vec<Observation>,
    pub actions: Vec<Vec<f64>>,
    pub dt: f64,
    pub meta: EpisodeMeta,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn validate(&self, schema: Schema) -> Result<()> {
        let width = match schema {
            Schema::Merge => 6,
            Schema::Ngsim => 9,
        };
        if self.observations.is_empty() {
            return Err(Error::InvalidInput(format!("episode {} is empty", self.id)));
        }
        if self.actions.len() + 1 != self.observations.len() {
            return Err(Error::InvalidInput(format!(
                "episode {}: {} observations need {} actions, got {}",
                self.id,
                self.observations.len(),
                self.observations.len() - 1,
                self.actions.len()
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidInput(format!("episode {}: dt must be positive", self.id)));
        }
        for y in &self.observations {
            if y.0.len() != width || !y.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "episode {}: observations must be finite with width {width}",
                    self.id
                )));
            }
        }
        for a in &self.actions {
            if a.len() != schema.action_width() || a.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "episode {}: actions must be finite with width {}",
                    self.id,
                    schema.action_width()
                )));
            }
        }
        Ok(())
    }

    /// Merge schema: the automated vehicle's actions.
    pub fn cav_actions(&self) -> Vec<f64> {
        self.actions.iter().map(|a| a[0]).collect()
    }

    /// Merge schema: the human driver's actions.
    pub fn hdv_actions(&self) -> Vec<f64> {
        self.actions.iter().map(|a| a[1]).collect()
    }

    /// Actions applied at step `t - 1`, zeros before the first step.
    pub fn prev_actions(&self, t: usize) -> Vec<f64> {
        if t == 0 {
            vec![0.0; self.actions.first().map_or(0, |a| a.len())]
        } else {
            self.actions[t - 1].clone()
        }
    }

    /// Merge schema: column `slot` of every observation.
    pub fn column(&self, slot: usize) -> Vec<f64> {
        self.observations.iter().map(|y| y.0[slot]).collect()
    }

    /// Merge schema: episode built from two state sequences and their actions.
    pub fn from_merge_states(
        id: String,
        cav: &[(f64, f64)],
        hdv: &[(f64, f64)],
        actions: Vec<[f64; 2]>,
        dt: f64,
        meta: EpisodeMeta,
    ) -> Self {
        let observations = (0..cav.len())
            .map(|t| {
                let prev = if t == 0 { [0.0, 0.0] } else { actions[t - 1] };
                Observation::merge(cav[t].0, cav[t].1, prev[0], hdv[t].0, hdv[t].1, prev[1])
            })
            .collect();
        Self {
            id,
            observations,
            actions: actions.into_iter().map(|a| a.to_vec()).collect(),
            dt,
            meta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    All,
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: Schema,
    pub split: Split,
    pub episodes: Vec<Episode>,
}

impl Dataset {
    pub fn new(schema: Schema, episodes: Vec<Episode>) -> Self {
        Self {
            schema,
            split: Split::All,
            episodes,
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.episodes.iter().try_for_each(|e| e.validate(self.schema))
    }

    /// Renders the dataset as CSV text. `meta` lines are emitted first as
    /// `# key: value` comments.
    pub fn to_csv_string(&self, meta: &[(String, String)]) -> String {
        let mut out = String::new();
        for (k, v) in meta {
            let _ = writeln!(out, "# {k}: {v}");
        }
        let cols: &[&str] = match self.schema {
            Schema::Merge => &MERGE_COLUMNS,
            Schema::Ngsim => &NGSIM_COLUMNS,
        };
        out.push_str(&cols.join(","));
        out.push('\n');
        for ep in &self.episodes {
            for (t, y) in ep.observations.iter().enumerate() {
                let act = ep
                    .actions
                    .get(t)
                    .cloned()
                    .unwrap_or_else(|| vec![0.0; self.schema.action_width()]);
                let time = t as f64 * ep.dt;
                let y = &y.0;
                let fields: Vec<f64> = match self.schema {
                    Schema::Merge => vec![
                        time, y[obs::Z1], y[obs::V1], act[0], y[obs::Z2], y[obs::V2], act[1],
                    ],
                    Schema::Ngsim => vec![
                        time,
                        y[ngsim::RAMP_LAT],
                        y[ngsim::RAMP_LON],
                        ramp_speed(ep, t),
                        act[0],
                        y[ngsim::LEAD_Z],
                        y[ngsim::LEAD_V],
                        act[1],
                        y[ngsim::LAG_Z],
                        y[ngsim::LAG_V],
                        act[2],
                    ],
                };
                out.push_str(&ep.id);
                for f in fields {
                    let _ = write!(out, ",{f}");
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path, meta: &[(String, String)]) -> Result<()> {
        crate::write_atomic(path, self.to_csv_string(meta).as_bytes())
    }
}

// The ramp speed is not part of the observation; exported NGSIM data carries
// the longitudinal difference quotient in its place.
fn ramp_speed(ep: &Episode, t: usize) -> f64 {
    let lon = |k: usize| ep.observations[k].0[ngsim::RAMP_LON];
    if ep.len() < 2 {
        0.0
    } else if t + 1 < ep.len() {
        (lon(t + 1) - lon(t)) / ep.dt
    } else {
        (lon(t) - lon(t - 1)) / ep.dt
    }
}

struct Row {
    line: usize,
    t: f64,
    values: Vec<f64>,
}

/// Reads a trajectory CSV in either schema.
///
/// The schema is NGSIM if any NGSIM-only column is present, merge otherwise.
pub fn load_trajectory_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory_csv(&text)
}

pub fn parse_trajectory_csv(text: &str) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            column: String::new(),
            msg: e.to_string(),
        })?
        .clone();
    let names: Vec<&str> = headers.iter().collect();
    let schema = if NGSIM_COLUMNS[2..].iter().any(|c| names.contains(c)) {
        Schema::Ngsim
    } else {
        Schema::Merge
    };
    let required: &[&str] = match schema {
        Schema::Merge => &MERGE_COLUMNS,
        Schema::Ngsim => &NGSIM_COLUMNS,
    };
    let mut index = Vec::with_capacity(required.len());
    for col in required {
        match names.iter().position(|n| n == col) {
            Some(i) => index.push(i),
            None => return Err(Error::MissingColumn(col.to_string())),
        }
    }

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Row>> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            row: e.position().map_or(0, |p| p.line() as usize),
            column: String::new(),
            msg: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let id = record.get(index[0]).unwrap_or_default().to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                row: line,
                column: "episode_id".into(),
                msg: "empty episode id".into(),
            });
        }
        let mut values = Vec::with_capacity(required.len() - 1);
        for (col, &i) in required.iter().zip(&index).skip(1) {
            let raw = record.get(i).unwrap_or_default();
            let x: f64 = raw.parse().map_err(|_| Error::Parse {
                row: line,
                column: col.to_string(),
                msg: format!("`{raw}` is not a number"),
            })?;
            if !x.is_finite() {
                return Err(Error::Parse {
                    row: line,
                    column: col.to_string(),
                    msg: format!("non-finite value `{raw}`"),
                });
            }
            values.push(x);
        }
        let t = values.remove(0);
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push(Row { line, t, values });
    }

    let mut dt_all: Option<f64> = None;
    let mut episodes = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = groups.remove(&id).unwrap_or_default();
        rows.sort_by(|a, b| a.t.total_cmp(&b.t));
        for w in rows.windows(2) {
            let gap = w[1].t - w[0].t;
            let dt = *dt_all.get_or_insert(gap);
            if !(gap > 0.0) || (gap - dt).abs() > DT_TOLERANCE {
                return Err(Error::Timing {
                    row: w[1].line,
                    msg: format!(
                        "episode {id}: time step {gap} differs from dt {dt} (t = {} after {})",
                        w[1].t, w[0].t
                    ),
                });
            }
        }
        episodes.push((id, rows));
    }
    let dt = match dt_all {
        Some(dt) => dt,
        None if episodes.is_empty() => 0.0,
        None => {
            return Err(Error::Timing {
                row: episodes[0].1[0].line,
                msg: "cannot infer dt: no episode has two rows".into(),
            })
        }
    };

    let episodes = episodes
        .into_iter()
        .map(|(id, rows)| build_episode(schema, id, &rows, dt))
        .collect();
    Ok(Dataset::new(schema, episodes))
}

fn build_episode(schema: Schema, id: String, rows: &[Row], dt: f64) -> Episode {
    // column order of `values` follows the schema without episode_id and t
    let acts: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| match schema {
            Schema::Merge => vec![r.values[2], r.values[5]],
            Schema::Ngsim => vec![r.values[3], r.values[6], r.values[9]],
        })
        .collect();
    let observations = rows
        .iter()
        .enumerate()
        .map(|(t, r)| {
            let prev = if t == 0 {
                vec![0.0; schema.action_width()]
            } else {
                acts[t - 1].clone()
            };
            let v = &r.values;
            match schema {
                Schema::Merge => Observation::merge(v[0], v[1], prev[0], v[3], v[4], prev[1]),
                Schema::Ngsim => Observation::ngsim([
                    v[0], v[1], prev[0], v[4], v[5], prev[1], v[7], v[8], prev[2],
                ]),
            }
        })
        .collect();
    let n = rows.len();
    Episode {
        id,
        observations,
        actions: acts.into_iter().take(n.saturating_sub(1)).collect(),
        dt,
        meta: EpisodeMeta::default(),
    }
}
