//! Dense numerics, reverse-mode gradients, finite-difference checking and
//! the AdamW optimizer.

pub mod gradcheck;
pub mod layers;
pub mod matrix;
pub mod optim;
pub mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use layers::{linear_forward, BoundLayer, LayerParams};
pub use matrix::{matmul, Matrix};
pub use optim::{AdamConfig, AdamState};
pub use tape::{Gradients, Tape, Var};
