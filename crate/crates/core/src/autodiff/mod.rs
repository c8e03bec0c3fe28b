//! Dense-matrix reverse-mode differentiation and the Adam optimizer.

mod adam;
mod gradcheck;
mod matrix;
mod tape;

pub use adam::Adam;
pub use gradcheck::{finite_diff_check, norm_relative_error, relative_error, GradCheckReport, REL_ERR_FLOOR};
pub use matrix::Matrix;
pub use tape::{sigmoid, softplus, Segments, Tape, Var, PROB_CLAMP};
