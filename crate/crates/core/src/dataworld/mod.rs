//! Synthetic collision scenarios, the labeling protocol, surrogate camera
//! features, the JSONL trajectory format and oversampled segment serving.

pub mod camera;
pub mod io;
pub mod labeling;
pub mod segments;
pub mod world;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use camera::{ground_truth_vector, CameraRig, SurrogateEncoder, GT_AGENTS, GT_DIM};
pub use io::{assemble, read_dataset, read_frames, write_dataset, write_frames};
pub use labeling::{label, label_frame};
pub use segments::{sample_epoch, segment, segment_dataset, split_dataset, Category, SamplingConfig, SubTrajectory};
pub use world::{frames_from_rollout, generate, generate_dataset, sample_scenario, Controller, ObstacleScript, Rollout, Scenario, WorldConfig};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("collision step {step} outside 0..{frames}")]
    CollisionStep { step: i64, frames: usize },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
    #[error("invalid world config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Safety {
    Safe,
    Unsafe,
}

impl Safety {
    pub fn is_safe(self) -> bool {
        self == Safety::Safe
    }
}

/// One timestep of a recorded trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledFrame {
    pub traj: String,
    pub t: usize,
    /// One feature vector per camera view.
    pub features: Vec<Vec<f32>>,
    /// Control applied at this step (ego velocity command, m/s).
    pub u: Vec<f32>,
    pub state_label: Safety,
    pub control_label: Safety,
    /// Ground-truth ego and nearest-agent positions and velocities.
    pub gt: Vec<f32>,
}

/// Sidecar metadata for a frame file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub dt: f64,
    pub cameras: usize,
    pub feature_dim: usize,
    pub control_dim: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_version: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub frames: Vec<LabeledFrame>,
}

impl Trajectory {
    /// First frame whose state is labeled unsafe.
    pub fn collision_step(&self) -> Option<usize> {
        self.frames.iter().position(|f| f.state_label == Safety::Unsafe)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn frame_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn frames(&self) -> impl Iterator<Item = &LabeledFrame> {
        self.trajectories.iter().flat_map(|t| t.frames.iter())
    }

    pub fn gt_dim(&self) -> Option<usize> {
        self.frames().next().map(|f| f.gt.len())
    }

    /// Checks every frame against the metadata and the trajectory ordering.
    pub fn validate(&self) -> Result<()> {
        let mut gt_dim = None;
        for traj in &self.trajectories {
            for (k, f) in traj.frames.iter().enumerate() {
                let here = || format!("trajectory {} frame t={}", traj.id, f.t);
                if f.traj != traj.id {
                    return Err(DataError::Inconsistent(format!("{}: wrong trajectory id", here())));
                }
                if k > 0 && f.t <= traj.frames[k - 1].t {
                    return Err(DataError::Inconsistent(format!("{}: steps not increasing", here())));
                }
                if f.features.len() != self.meta.cameras {
                    return Err(DataError::Inconsistent(format!(
                        "{}: {} camera views, meta says {}",
                        here(),
                        f.features.len(),
                        self.meta.cameras
                    )));
                }
                if let Some(v) = f.features.iter().find(|v| v.len() != self.meta.feature_dim) {
                    return Err(DataError::Inconsistent(format!(
                        "{}: feature width {}, meta says {}",
                        here(),
                        v.len(),
                        self.meta.feature_dim
                    )));
                }
                if f.u.len() != self.meta.control_dim {
                    return Err(DataError::Inconsistent(format!(
                        "{}: control width {}, meta says {}",
                        here(),
                        f.u.len(),
                        self.meta.control_dim
                    )));
                }
                match gt_dim {
                    None => gt_dim = Some(f.gt.len()),
                    Some(d) if d != f.gt.len() => {
                        return Err(DataError::Inconsistent(format!("{}: ground-truth width changes", here())));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}
