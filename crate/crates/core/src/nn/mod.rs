//! A small differentiable-computation core sized for the two encoder-decoder
//! architectures: dense and GRU layers over a named parameter store, a
//! layer-granular reverse-mode tape, Adam, and finite-difference checks.
//!
//! All arithmetic is `f64`.

mod adam;
mod gradcheck;
mod layers;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, finite_diff_vec, GradCheckOptions, GradCheckReport};
pub use layers::{relu, sigmoid, DenseLayer, GruCache, GruCell};
pub use params::{NamedArray, ParamId, ParamStore};
pub use tape::{Gradients, Tape, ValueId};
