//! Zeroth-order multi-agent source seeking.
//!
//! A network of agents measures a time-varying scalar field at its own
//! positions, estimates gradients from neighbour differences, holds a
//! formation through a navigation potential and tracks the field's moving
//! minimiser. Every step is audited against the descent inequalities and
//! convergence bounds the method comes with.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod acceptance;
pub mod analysis;
pub mod cli;
pub mod config;
pub mod controller;
pub mod error;
pub mod estimator;
pub mod exec;
pub mod formation;
pub mod graph;
pub mod output;
pub mod scenario;
pub mod simkernel;

pub use error::{Error, Result};
pub use exec::Execution;
