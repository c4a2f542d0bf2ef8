//! Simulation, planning, training and evaluation primitives for benchmarking
//! 2D mobile-robot navigation planners.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: occupancy grids, poses, trajectories, raycasting, distance fields
//! * [`mapgen`]: seeded indoor/outdoor map generation and PGM + YAML map bundles
//! * [`scenario`]: scenario documents, validation, random tasks, obstacle playback
//! * [`robots`]: preset robot registry, kinematics and lidar observation
//! * [`sim`]: deterministic episode execution
//! * [`planner`]: planner interface, dynamic-window baseline and learned-policy runner
//! * [`nn`]: architecture documents, forward/backward evaluation, Adam
//! * [`rl`]: rewards, hyperparameters, PPO training, model artifacts
//! * [`metrics`]: navigation metrics, CSV results and plot data
//!
//! Batch workloads (episode sweeps, per-sample gradients) go through [`par`],
//! which uses rayon when the `parallel` feature is enabled and falls back to
//! plain iteration otherwise.

pub mod error;
pub mod geometry;
pub mod mapgen;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod planner;
pub mod rl;
pub mod robots;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};

use serde::{Deserialize, Serialize};

/// Who may read a user-authored document besides its owner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Public,
    #[default]
    Private,
}

/// A machine-readable validation failure: a field path plus a reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub reason: String,
    /// Index of the offending network module, when applicable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub module_index: Option<usize>,
}

impl Violation {
    pub fn new(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            reason: reason.into(),
            module_index: None,
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.reason)
    }
}
