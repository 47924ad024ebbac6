//! Variational imitation learning from diverse-quality demonstrations.

pub mod model;
pub mod objective;
pub mod rl;
pub mod train;

pub use model::*;
pub use objective::*;
pub use rl::*;
pub use train::*;
