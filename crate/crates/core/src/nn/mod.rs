//! Small dense networks and the reverse-mode machinery used to train them.

pub mod grad;
pub mod mlp;
pub mod tape;

pub use grad::{finite_diff_check, finite_diff_report, grad_scalar, FdReport, GradBundle, Objective};
pub use mlp::{mlp_init, Activation, Layer, Mlp, MlpShape, MlpVars};
pub use tape::{Adjoints, Mat, Tape, Var};
