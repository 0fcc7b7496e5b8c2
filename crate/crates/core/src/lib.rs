//! Ego-centered occupancy grid prediction with rule-based ego anticipation
//! and a learned environment model.

pub mod config;
pub mod error;
pub mod gridops;
pub mod kinematics;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod predictor;
pub mod record;
pub mod worldsim;

pub use error::{Error, Result};
