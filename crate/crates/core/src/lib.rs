//! Highway-merging laboratory: a learned approximate-information-state
//! predictor of a human driver on the ramp, and an iterative model-predictive
//! controller for the automated vehicle on the main road.
//!
//! Module map:
//! - [`dynamics`]: vehicle states, double-integrator stepping, scenario config.
//! - [`driver`]: feature-based human-driver model (data generator and opponent).
//! - [`nn`]: dense/GRU layers, reverse-mode gradients, Adam, gradient checks.
//! - [`ais`]: encoder/decoder model in the merge and NGSIM variants.
//! - [`training`]: dataset generation, CSV ingestion, surrogate loss, training.
//! - [`mpc`]: stage cost, projected-gradient horizon solver, iterative MPC.
//! - [`evaluation`]: closed-loop episodes, safety metric, Monte-Carlo tables.

pub mod ais;
pub mod driver;
pub mod dynamics;
mod error;
pub mod evaluation;
pub mod mpc;
pub mod nn;
pub mod seed;
pub mod training;

pub use error::{Error, Result};

/// Writes `bytes` to a sibling temporary file and renames it into place, so a
/// failed write never leaves a truncated `path` behind.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.partial"));
    let res = std::fs::write(&tmp, bytes).and_then(|_| std::fs::rename(&tmp, path));
    if let Err(e) = res {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}
