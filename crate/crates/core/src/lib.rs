//! Discrete-time mean-field stochastic maximum principle on finite scenario trees.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adjoint;
pub mod error;
pub mod forward;
pub mod io;
pub mod optimizer;
pub mod problem;
pub mod replica;
pub mod report;
pub mod selftest;
pub mod smp;
pub mod tree;

pub use error::{Error, Result};
