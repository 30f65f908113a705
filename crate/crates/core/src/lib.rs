//! Gradient-free training of fully connected ReLU networks with ADMM, where
//! every least-squares subproblem is solved by a truncated LSMR run in either
//! `f64` or saturating fixed-point arithmetic.

pub mod fixedpoint;
pub mod lsmr;
pub mod matrix;
pub mod admm;
pub mod data;
pub mod cli;
