use rand::seq::index::sample;

use super::params::ParamStore;
use crate::seed::rng_from_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Maximum admissible relative error.
    pub tolerance: f64,
    /// Denominator floor so that near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Check at most this many scalars (random subsample) when set.
    pub max_params: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-7,
            max_params: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Flat index of the worst coordinate.
    pub worst_index: Option<usize>,
    pub passed: bool,
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares an analytic gradient of `f` at `x` with central differences on
/// the listed coordinates (all when `coords` is `None`).
pub fn finite_diff_vec<F>(
    x: &[f64],
    analytic: &[f64],
    mut f: F,
    opts: &GradCheckOptions,
) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    let coords: Vec<usize> = match opts.max_params {
        Some(k) if k < x.len() => {
            let mut idx = sample(&mut rng_from_seed(opts.seed), x.len(), k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..x.len()).collect(),
    };
    let mut probe = x.to_vec();
    let mut worst = (0.0f64, None);
    for &i in &coords {
        let orig = probe[i];
        probe[i] = orig + opts.step;
        let fp = f(&probe);
        probe[i] = orig - opts.step;
        let fm = f(&probe);
        probe[i] = orig;
        let numeric = (fp - fm) / (2.0 * opts.step);
        let e = rel_err(analytic[i], numeric, opts.floor);
        if !(e <= worst.0) {
            worst = (e, Some(i));
        }
    }
    GradCheckReport {
        max_rel_error: worst.0,
        checked: coords.len(),
        worst_index: worst.1,
        passed: worst.0 < opts.tolerance,
    }
}

/// Finite-difference check of parameter gradients. `loss` evaluates the
/// model's scalar loss on a fixed input batch for the given parameters.
pub fn finite_diff_check<F>(
    params: &ParamStore,
    analytic: &ParamStore,
    loss: F,
    opts: &GradCheckOptions,
) -> GradCheckReport
where
    F: Fn(&ParamStore) -> f64,
{
    if !params.same_layout(analytic) || !params.all_finite() {
        return GradCheckReport {
            max_rel_error: f64::INFINITY,
            checked: 0,
            worst_index: None,
            passed: false,
        };
    }
    let mut scratch = params.clone();
    finite_diff_vec(&params.flat(), &analytic.flat(), |x| {
        scratch.set_flat(x).expect("layout checked above");
        loss(&scratch)
    }, opts)
}
