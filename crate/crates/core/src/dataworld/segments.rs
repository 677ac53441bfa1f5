//! Fixed-length segments and the oversampled epoch multiset.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, LabeledFrame, Safety, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Safe,
    Unsafe,
    Transition,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Safe, Category::Unsafe, Category::Transition];

    pub fn of(frames: &[LabeledFrame]) -> Option<Category> {
        let all = |s: Safety, c: Safety| frames.iter().all(|f| f.state_label == s && f.control_label == c);
        if all(Safety::Safe, Safety::Safe) {
            Some(Category::Safe)
        } else if all(Safety::Unsafe, Safety::Unsafe) {
            Some(Category::Unsafe)
        } else if all(Safety::Safe, Safety::Unsafe) {
            Some(Category::Transition)
        } else {
            None
        }
    }
}

/// A window of `len` consecutive frames of trajectory `traj`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubTrajectory {
    pub traj: usize,
    pub start: usize,
    pub len: usize,
    pub category: Category,
}

impl SubTrajectory {
    pub fn frames<'a>(&self, ds: &'a Dataset) -> &'a [LabeledFrame] {
        &ds.trajectories[self.traj].frames[self.start..self.start + self.len]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// Copies of each unsafe and transition segment per epoch.
    pub oversample: usize,
    /// Safe segments drawn per trajectory per epoch.
    pub safe_per_trajectory: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            oversample: 10,
            safe_per_trajectory: 5,
        }
    }
}

/// Non-overlapping windows aligned so that one window ends right before
/// the collision frame. Windows with mixed labels are dropped.
pub fn segment(traj_index: usize, traj: &Trajectory, horizon: usize) -> Vec<SubTrajectory> {
    if horizon == 0 || traj.len() < horizon {
        if horizon > 0 {
            log::warn!("trajectory {} has {} frames, shorter than {horizon}; skipped", traj.id, traj.len());
        }
        return Vec::new();
    }
    let offset = traj.collision_step().map_or(0, |c| c % horizon);
    (offset..=traj.len() - horizon)
        .step_by(horizon)
        .filter_map(|start| {
            Category::of(&traj.frames[start..start + horizon]).map(|category| SubTrajectory {
                traj: traj_index,
                start,
                len: horizon,
                category,
            })
        })
        .collect()
}

pub fn segment_dataset(ds: &Dataset, horizon: usize) -> Vec<Vec<SubTrajectory>> {
    ds.trajectories
        .iter()
        .enumerate()
        .map(|(i, t)| segment(i, t, horizon))
        .collect()
}

/// One epoch: every unsafe and transition segment `oversample` times, plus
/// `safe_per_trajectory` seeded draws from each trajectory's safe segments
/// (with replacement only when it has fewer than that). Shuffled.
pub fn sample_epoch(segments: &[Vec<SubTrajectory>], cfg: &SamplingConfig, seed: u64) -> Vec<SubTrajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for traj in segments {
        let safe: Vec<SubTrajectory> = traj.iter().copied().filter(|s| s.category == Category::Safe).collect();
        for s in traj.iter().filter(|s| s.category != Category::Safe) {
            out.extend(std::iter::repeat_n(*s, cfg.oversample));
        }
        if safe.is_empty() {
            continue;
        }
        if safe.len() >= cfg.safe_per_trajectory {
            out.extend(safe.choose_multiple(&mut rng, cfg.safe_per_trajectory).copied());
        } else {
            out.extend((0..cfg.safe_per_trajectory).map(|_| safe[rng.gen_range(0..safe.len())]));
        }
    }
    out.shuffle(&mut rng);
    out
}

/// Seeded 80/10/10 split by trajectory into train, validation and test.
pub fn split_dataset(ds: &Dataset, seed: u64) -> (Dataset, Dataset, Dataset) {
    let mut order: Vec<usize> = (0..ds.trajectories.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = order.len();
    let n_train = (n as f64 * 0.8).round() as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    let take = |ids: &[usize]| {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        Dataset {
            meta: ds.meta.clone(),
            trajectories: ids.into_iter().map(|i| ds.trajectories[i].clone()).collect(),
        }
    };
    let (train, rest) = order.split_at(n_train.min(n));
    let (val, test) = rest.split_at(n_val.min(rest.len()));
    (take(train), take(val), take(test))
}
