#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod baselines;
pub mod checks;
pub mod demogen;
pub mod env;
pub mod error;
pub mod harness;
pub mod math;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod vild;

pub use error::{Result, VildError};
