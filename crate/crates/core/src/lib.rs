//! Communication-efficient distributed learning with adaptive aggregation
//! under resource budgets.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod control;
pub mod data;
pub mod engine;
pub mod error;
pub mod harness;
pub mod models;
pub mod param;
pub mod resources;
pub mod rng;

pub use error::{Error, Result};
pub use param::ParamVector;
