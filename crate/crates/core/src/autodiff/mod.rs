//! Reverse-mode automatic differentiation and its support code.

pub mod dropout;
pub mod gradcheck;
pub mod init;
pub mod param;
pub mod rng;
pub mod tape;

pub use dropout::dropout_mask;
pub use gradcheck::{grad_check, relative_error, GradCheckReport, DEFAULT_EPSILON};
pub use init::{init_gaussian, init_orthogonal, init_zero, GAUSSIAN_STD};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use rng::RngState;
pub use tape::{log_sum_exp, sigmoid, softmax, Tape, Var};
