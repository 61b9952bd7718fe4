//! Train DDPG agents on classic control tasks, ablate windows of actor
//! units, and analyse how the ablations change returns, unit-action
//! correlation patterns and activation trajectories.

pub mod ablate;
pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod ddpg;
pub mod embed;
pub mod env;
pub mod error;
pub mod fsutil;
pub mod gradcheck;
pub mod net;
pub mod numerics;

pub use error::{Error, Result};
