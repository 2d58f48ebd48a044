//! Visual-inertial MSCKF with delayed and immediate update strategies and a
//! synthetic Monte-Carlo bench.

pub mod bench;
pub mod error;
pub mod filter;
pub mod geom;
pub mod propagation;
pub mod sim;
pub mod state;
pub mod strategies;
pub mod vision;

pub use error::{Error, Result};
