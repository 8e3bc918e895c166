//! Small dense numerical kernel: vectors and matrices in `f64`, perceptrons
//! with hand-written backward passes, Adam, and a central-difference gradient
//! oracle used by the test suites.

mod adam;
mod gradcheck;
mod matrix;
mod mlp;
mod seed;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error};
pub use matrix::{
    add_assign, axpy, dot, log_sigmoid, norm2, normalize, scale, sigmoid, softplus, Matrix,
};
pub use mlp::{Activation, Mlp, MlpCache, MlpGrad};
pub use seed::{derive_seed, rng_from, SeedRng};
