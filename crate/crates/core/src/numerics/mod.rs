//! Dense matrix math, reverse-mode gradients, parameter sets and a
//! finite-difference gradient checker.

mod gradcheck;
mod matrix;
mod params;
mod tape;

pub use gradcheck::{finite_diff_check, REL_FLOOR};
pub use matrix::{clamp_rows, row_softmax, scale_rows_to_max, Matrix};
pub use params::{reduce_grads, Ema, ParamSet};
pub use tape::{smooth_l1, weighted_cross_entropy, Grads, Tape, Var};
