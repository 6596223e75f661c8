//! Command implementations behind the `mergelab` binary.
//!
//! Every command takes a [`Context`] (the effective [`RunConfig`] plus the
//! command name) and writes its outputs through an [`Outputs`] guard, which
//! deletes everything it wrote if the command fails before committing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mergelab::driver::{IrlWeights, Preset, StyleRange};
use mergelab::dynamics::ScenarioConfig;
use mergelab::evaluation::{McConfig, J_MAX, TAU_SAFE};
use mergelab::training::TrainConfig;

mod commands;

pub use commands::{
    cmd_evaluate, cmd_generate, cmd_predict, cmd_simulate, cmd_train, GenerateSummary,
    PredictSummary, SimulateSummary, TrainSummary,
};

pub const TOOL: &str = concat!("mergelab ", env!("CARGO_PKG_VERSION"));

/// Monte-Carlo settings of `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub n: usize,
    pub rho_values: Vec<f64>,
    pub tau_safe: f64,
    pub j_max: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n: 500,
            rho_values: vec![0.6, 0.8, 1.0],
            tau_safe: TAU_SAFE,
            j_max: J_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Trajectory CSV; `<out_dir>/dataset.csv` when unset.
    pub dataset: Option<PathBuf>,
    /// Model JSON; `<out_dir>/model.json` when unset.
    pub model: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            dataset: None,
            model: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl Paths {
    pub fn dataset(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out_dir.join("dataset.csv"))
    }

    pub fn model(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.out_dir.join("model.json"))
    }
}

/// Everything a run depends on. Missing fields take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed.
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub style_range: StyleRange,
    /// Named human-driver weights. `aggressive` and `conservative` are
    /// built in (scaled to the scenario's `v_max`) unless redefined here.
    pub presets: BTreeMap<String, IrlWeights>,
    pub train: TrainConfig,
    pub evaluation: EvalSettings,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.style_range.validate()?;
        self.train.validate()?;
        for (name, w) in &self.presets {
            w.validate(&self.scenario)
                .with_context(|| format!("preset `{name}`"))?;
        }
        if self.train.horizon != self.scenario.horizon {
            bail!(
                "train.horizon ({}) differs from scenario.horizon ({})",
                self.train.horizon,
                self.scenario.horizon
            );
        }
        let e = &self.evaluation;
        if e.n == 0 {
            bail!(mergelab::Error::Usage("evaluation.n must be at least 1".into()));
        }
        if e.rho_values.is_empty() || e.rho_values.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            bail!("evaluation.rho_values must be a non-empty list of finite values >= 0");
        }
        if !(e.tau_safe.is_finite() && e.tau_safe >= 0.0) {
            bail!("evaluation.tau_safe must be finite and >= 0");
        }
        if e.j_max == 0 {
            bail!("evaluation.j_max must be at least 1");
        }
        if self.paths.out_dir.as_os_str().is_empty() {
            bail!("paths.out_dir must not be empty");
        }
        Ok(())
    }

    /// Weights of a configured or built-in preset.
    pub fn preset(&self, name: &str) -> Result<IrlWeights> {
        if let Some(w) = self.presets.get(name) {
            return Ok(w.clone());
        }
        match name.parse::<Preset>() {
            Ok(p) => Ok(p.weights(&self.scenario)),
            Err(_) => {
                let mut known: Vec<&str> = vec!["aggressive", "conservative"];
                known.extend(self.presets.keys().map(String::as_str));
                known.sort_unstable();
                known.dedup();
                bail!("unknown preset `{name}` (known: {})", known.join(", "))
            }
        }
    }

    pub fn mc_config(&self) -> McConfig {
        McConfig {
            rho_values: self.evaluation.rho_values.clone(),
            n: self.evaluation.n,
            master_seed: self.seed,
            tau_safe: self.evaluation.tau_safe,
            j_max: self.evaluation.j_max,
        }
    }

    /// SHA-256 of the configuration with the file locations blanked, so the
    /// digest identifies the experiment rather than where it was written.
    pub fn sha256(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Effective configuration of one command invocation.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub command: String,
}

impl Context {
    pub fn new(config: RunConfig, command: &str) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            command: command.to_string(),
        })
    }

    /// Provenance lines written at the top of every output file.
    pub fn meta(&self) -> Vec<(String, String)> {
        vec![
            ("tool".into(), TOOL.into()),
            ("command".into(), self.command.clone()),
            ("seed".into(), self.config.seed.to_string()),
            ("config_sha256".into(), self.config.sha256()),
        ]
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.config.paths.out_dir.join(name)
    }
}

/// Files written by one command. Unless [`Outputs::commit`] is called, the
/// files are deleted when the guard is dropped.
#[derive(Debug, Default)]
pub struct Outputs {
    written: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)
                .with_context(|| format!("cannot create directory {}", dir.display()))?;
        }
        mergelab::write_atomic(path, bytes)?;
        self.written.push(path.to_path_buf());
        Ok(())
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.written)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.written {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

/// Exit status for a failed command: 2 for usage errors, 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let usage = err
        .chain()
        .any(|e| matches!(e.downcast_ref::<mergelab::Error>(), Some(mergelab::Error::Usage(_))));
    if usage {
        2
    } else {
        1
    }
}
