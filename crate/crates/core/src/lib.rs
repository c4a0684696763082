// NaN must fail positivity checks, so `!(x > 0.0)` is intended.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod cv;
pub mod distance;
pub mod embed;
pub mod ensemble;
pub mod eval;
pub mod losses;
pub mod seed;
pub mod synth;
pub mod trainsim;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
