//! Surrogate camera views.
//!
//! Each camera covers an equal angular sector around the ego heading and
//! sees the agents inside it as relative positions and velocities, nearest
//! first, zero-padded to a fixed slot count. A frozen random tanh network
//! maps that observation to a feature vector, standing in for a pretrained
//! vision backbone.

use std::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::world::Vec2;

/// Visible agents per camera.
pub const SLOTS: usize = 3;
/// `[x, y, vx, vy, present]` per slot.
pub const SLOT_DIM: usize = 5;
pub const OBSERVATION_DIM: usize = SLOTS * SLOT_DIM;
/// Agents in the ground-truth vector.
pub const GT_AGENTS: usize = 4;
pub const GT_DIM: usize = 4 + 4 * GT_AGENTS;

const POSITION_SCALE: f64 = 20.0;
const VELOCITY_SCALE: f64 = 10.0;

fn rotate(v: Vec2, angle: f64) -> Vec2 {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// 0-based sector index of a relative position seen from `heading`.
pub fn sector_of(rel: Vec2, heading: f64, cameras: usize) -> usize {
    let local = rotate(rel, -heading);
    let angle = local[1].atan2(local[0]).rem_euclid(2.0 * PI);
    ((angle / (2.0 * PI / cameras as f64)) as usize).min(cameras - 1)
}

/// Frozen two-layer tanh network.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateEncoder {
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

impl SurrogateEncoder {
    pub fn new(input_dim: usize, feature_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |fan_in: usize, fan_out: usize| {
            let bound = (3.0 / fan_in as f64).sqrt();
            let w = Array2::from_shape_simple_fn((fan_out, fan_in), || rng.gen_range(-bound..=bound));
            let b = Array1::from_shape_simple_fn(fan_out, || rng.gen_range(-0.3..=0.3));
            (w, b)
        };
        let (w1, b1) = layer(input_dim, feature_dim);
        let (w2, b2) = layer(feature_dim, feature_dim);
        Self { w1, b1, w2, b2 }
    }

    pub fn feature_dim(&self) -> usize {
        self.b2.len()
    }

    pub fn encode(&self, observation: &[f64]) -> Vec<f32> {
        let x = Array1::from_vec(observation.to_vec());
        let h = (self.w1.dot(&x) + &self.b1).mapv(f64::tanh);
        let y = (self.w2.dot(&h) + &self.b2).mapv(f64::tanh);
        y.iter().map(|&v| v as f32).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub cameras: usize,
    pub range: f64,
    pub encoder: SurrogateEncoder,
}

impl CameraRig {
    pub fn new(cameras: usize, feature_dim: usize, range: f64, encoder_seed: u64) -> Self {
        Self {
            cameras,
            range,
            encoder: SurrogateEncoder::new(OBSERVATION_DIM, feature_dim, encoder_seed),
        }
    }

    /// Sector observations, one per camera.
    pub fn observations(&self, heading: f64, agents: &[(Vec2, Vec2)]) -> Vec<Vec<f64>> {
        let mut visible: Vec<Vec<(f64, Vec2, Vec2)>> = vec![Vec::new(); self.cameras];
        for &(rel, vel) in agents {
            let dist = rel[0].hypot(rel[1]);
            if dist > self.range {
                continue;
            }
            let cam = sector_of(rel, heading, self.cameras);
            visible[cam].push((dist, rotate(rel, -heading), rotate(vel, -heading)));
        }
        visible
            .into_iter()
            .map(|mut seen| {
                seen.sort_by(|a, b| a.0.total_cmp(&b.0));
                let mut obs = vec![0.0; OBSERVATION_DIM];
                for (slot, (_, p, v)) in seen.into_iter().take(SLOTS).enumerate() {
                    let o = &mut obs[slot * SLOT_DIM..(slot + 1) * SLOT_DIM];
                    o[0] = p[0] / POSITION_SCALE;
                    o[1] = p[1] / POSITION_SCALE;
                    o[2] = v[0] / VELOCITY_SCALE;
                    o[3] = v[1] / VELOCITY_SCALE;
                    o[4] = 1.0;
                }
                obs
            })
            .collect()
    }

    pub fn features(&self, heading: f64, agents: &[(Vec2, Vec2)]) -> Vec<Vec<f32>> {
        self.observations(heading, agents)
            .iter()
            .map(|o| self.encoder.encode(o))
            .collect()
    }
}

/// Ego position and velocity followed by the nearest agents' relative
/// positions and velocities, zero-padded.
pub fn ground_truth_vector(ego: Vec2, ego_velocity: Vec2, agents: &[(Vec2, Vec2)]) -> Vec<f32> {
    let mut sorted: Vec<&(Vec2, Vec2)> = agents.iter().collect();
    sorted.sort_by(|a, b| a.0[0].hypot(a.0[1]).total_cmp(&b.0[0].hypot(b.0[1])));
    let mut out = vec![ego[0], ego[1], ego_velocity[0], ego_velocity[1]];
    for k in 0..GT_AGENTS {
        match sorted.get(k) {
            Some((p, v)) => out.extend_from_slice(&[p[0], p[1], v[0], v[1]]),
            None => out.extend_from_slice(&[0.0; 4]),
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}
