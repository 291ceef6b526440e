//! Distributed cubature Kalman filtering with Cauchy-kernel MEEF weighting
//! and leader-follower Push-Sum consensus.

pub mod ckf;
pub mod consensus;
pub mod error;
pub mod kernel;
pub mod network;
pub mod noise;

pub use error::{Error, Result};
