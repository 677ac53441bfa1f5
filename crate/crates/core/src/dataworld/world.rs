//! Kinematic point-mass ego among scripted obstacles.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::{ground_truth_vector, CameraRig};
use super::labeling::label_frame;
use super::{DataError, Dataset, DatasetMeta, LabeledFrame, Result, Trajectory};
use crate::seeds::mix_seed;

pub type Vec2 = [f64; 2];

fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn scale(a: Vec2, c: f64) -> Vec2 {
    [a[0] * c, a[1] * c]
}

fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

fn dir(angle: f64) -> Vec2 {
    [angle.cos(), angle.sin()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub trajectories: usize,
    /// Frames per trajectory.
    pub steps: usize,
    pub obstacles: usize,
    /// Fraction of scenarios scripted to end in a collision.
    pub collision_fraction: f64,
    /// Ego-obstacle distance below which a collision is flagged (m).
    pub collision_radius: f64,
    pub dt: f64,
    /// Control box half-width (m/s).
    pub u_max: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    pub cameras: usize,
    pub feature_dim: usize,
    /// Agents farther than this are invisible to the cameras (m).
    pub camera_range: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            trajectories: 200,
            steps: 40,
            obstacles: 4,
            collision_fraction: 0.25,
            collision_radius: 2.0,
            dt: 0.1,
            u_max: 10.0,
            speed_min: 3.0,
            speed_max: 8.0,
            cameras: 6,
            feature_dim: 32,
            camera_range: 40.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.obstacles == 0 {
            return bad("at least one obstacle is required");
        }
        if !(self.collision_radius > 0.0) {
            return bad("collision radius must be positive");
        }
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(0.0..=1.0).contains(&self.collision_fraction) {
            return bad("collision fraction must be in [0, 1]");
        }
        if !(self.speed_min > 0.0 && self.speed_min <= self.speed_max && self.speed_max <= self.u_max) {
            return bad("need 0 < speed_min <= speed_max <= u_max");
        }
        if self.cameras == 0 || self.feature_dim == 0 {
            return bad("cameras and feature_dim must be positive");
        }
        if self.steps < 2 {
            return bad("trajectories need at least two steps");
        }
        Ok(())
    }
}

/// Piecewise-linear obstacle path over step indices; held at the ends.
#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleScript {
    pub waypoints: Vec<(f64, Vec2)>,
}

impl ObstacleScript {
    pub fn stationary(at: Vec2) -> Self {
        Self {
            waypoints: vec![(0.0, at)],
        }
    }

    pub fn position(&self, step: f64) -> Vec2 {
        let w = &self.waypoints;
        if step <= w[0].0 {
            return w[0].1;
        }
        for pair in w.windows(2) {
            let ((t0, p0), (t1, p1)) = (pair[0], pair[1]);
            if step <= t1 {
                let a = (step - t0) / (t1 - t0);
                return add(p0, scale(sub(p1, p0), a));
            }
        }
        w[w.len() - 1].1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Controller {
    /// Head for each waypoint in turn at constant speed.
    Waypoints { points: Vec<Vec2>, speed: f64 },
    Constant(Vec2),
}

impl Controller {
    fn command(&self, p: Vec2, next: &mut usize, dt: f64) -> Vec2 {
        match self {
            Controller::Constant(u) => *u,
            Controller::Waypoints { points, speed } => {
                let reach = speed * dt;
                loop {
                    let d = sub(points[*next], p);
                    let dist = norm(d);
                    if dist < reach && *next + 1 < points.len() {
                        *next += 1;
                        continue;
                    }
                    if dist < 1e-9 {
                        return [0.0, 0.0];
                    }
                    if dist < reach {
                        return scale(d, 1.0 / dt);
                    }
                    return scale(d, speed / dist);
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub ego_start: Vec2,
    pub ego_heading: f64,
    pub obstacles: Vec<ObstacleScript>,
    pub controller: Controller,
    pub steps: usize,
    pub collision_radius: f64,
    pub dt: f64,
    pub u_max: f64,
    pub seed: u64,
}

/// Simulated frames of one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub ego: Vec<Vec2>,
    /// Recorded controls, quantized to the file precision.
    pub controls: Vec<[f32; 2]>,
    /// `obstacles[k][t]`.
    pub obstacles: Vec<Vec<Vec2>>,
    pub collision_step: Option<usize>,
    pub collided_with: Option<usize>,
    pub heading0: f64,
    pub dt: f64,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.ego.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ego.is_empty()
    }

    fn control(&self, t: usize) -> Vec2 {
        let u = self.controls[t];
        [u[0] as f64, u[1] as f64]
    }

    /// Velocity over the last interval; the first frame reuses `u_0`.
    pub fn ego_velocity(&self, t: usize) -> Vec2 {
        self.control(t.saturating_sub(1))
    }

    pub fn obstacle_velocity(&self, k: usize, t: usize) -> Vec2 {
        let path = &self.obstacles[k];
        if path.len() < 2 {
            return [0.0, 0.0];
        }
        let (a, b) = if t == 0 { (0, 1) } else { (t - 1, t) };
        scale(sub(path[b], path[a]), 1.0 / self.dt)
    }

    /// Direction of travel, holding the last heading while stopped.
    pub fn headings(&self) -> Vec<f64> {
        let mut h = self.heading0;
        (0..self.len())
            .map(|t| {
                let v = self.ego_velocity(t);
                if norm(v) > 1e-6 {
                    h = v[1].atan2(v[0]);
                }
                h
            })
            .collect()
    }

    /// `(relative position, relative velocity)` of every obstacle at `t`.
    pub fn relative_agents(&self, t: usize) -> Vec<(Vec2, Vec2)> {
        let p = self.ego[t];
        let v = self.ego_velocity(t);
        (0..self.obstacles.len())
            .map(|k| (sub(self.obstacles[k][t], p), sub(self.obstacle_velocity(k, t), v)))
            .collect()
    }
}

/// Runs a scenario. After the first collision the ego halts and the
/// obstacle it hit stops where it was.
pub fn generate(s: &Scenario) -> Rollout {
    let mut p = s.ego_start;
    let mut next_wp = 0;
    let mut collision: Option<(usize, usize, Vec2)> = None;
    let mut ego = Vec::with_capacity(s.steps);
    let mut controls = Vec::with_capacity(s.steps);
    let mut obstacles = vec![Vec::with_capacity(s.steps); s.obstacles.len()];

    for t in 0..s.steps {
        let obs: Vec<Vec2> = s
            .obstacles
            .iter()
            .enumerate()
            .map(|(k, script)| match collision {
                Some((_, hit, at)) if hit == k => at,
                _ => script.position(t as f64),
            })
            .collect();
        if collision.is_none() {
            let nearest = obs
                .iter()
                .enumerate()
                .map(|(k, o)| (k, norm(sub(*o, p))))
                .filter(|&(_, d)| d < s.collision_radius)
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((k, _)) = nearest {
                collision = Some((t, k, obs[k]));
            }
        }
        let u = if collision.is_some() {
            [0.0, 0.0]
        } else {
            let raw = s.controller.command(p, &mut next_wp, s.dt);
            [raw[0].clamp(-s.u_max, s.u_max), raw[1].clamp(-s.u_max, s.u_max)]
        };
        let recorded = [u[0] as f32, u[1] as f32];
        ego.push(p);
        controls.push(recorded);
        for (k, o) in obs.into_iter().enumerate() {
            obstacles[k].push(o);
        }
        p = add(p, scale([recorded[0] as f64, recorded[1] as f64], s.dt));
    }

    Rollout {
        ego,
        controls,
        obstacles,
        collision_step: collision.map(|c| c.0),
        collided_with: collision.map(|c| c.1),
        heading0: s.ego_heading,
        dt: s.dt,
    }
}

fn crossing_script(at: Vec2, when: f64, heading: f64, speed: f64, dt: f64, steps: usize) -> ObstacleScript {
    let v = scale(dir(heading), speed * dt);
    ObstacleScript {
        waypoints: vec![
            (0.0, sub(at, scale(v, when))),
            (steps as f64, add(at, scale(v, steps as f64 - when))),
        ],
    }
}

fn min_distance(path: &[Vec2], script: &ObstacleScript) -> f64 {
    path.iter()
        .enumerate()
        .map(|(t, p)| norm(sub(script.position(t as f64), *p)))
        .fold(f64::INFINITY, f64::min)
}

/// Random scenario. With `force_collision` one obstacle is timed to cross
/// the ego's reference path; the others keep clear of it.
pub fn sample_scenario(cfg: &WorldConfig, seed: u64, force_collision: bool) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heading = rng.gen_range(0.0..2.0 * PI);
    let speed = rng.gen_range(cfg.speed_min..=cfg.speed_max);
    let length = speed * cfg.steps as f64 * cfg.dt;
    let wp1 = scale(dir(heading), length * rng.gen_range(0.3..0.7));
    let wp2 = add(wp1, scale(dir(heading + rng.gen_range(-0.6..0.6)), 1.2 * length));
    let mut scenario = Scenario {
        ego_start: [0.0, 0.0],
        ego_heading: heading,
        obstacles: Vec::new(),
        controller: Controller::Waypoints {
            points: vec![wp1, wp2],
            speed,
        },
        steps: cfg.steps,
        collision_radius: cfg.collision_radius,
        dt: cfg.dt,
        u_max: cfg.u_max,
        seed,
    };
    let reference = generate(&scenario).ego;
    let clearance = cfg.collision_radius + 1.0;

    if force_collision {
        let lo = 12.min(cfg.steps / 3);
        let hi = cfg.steps.saturating_sub(8).max(lo);
        let tc = rng.gen_range(lo..=hi);
        let target = reference[tc];
        let travel = if tc + 1 < reference.len() {
            sub(reference[tc + 1], reference[tc])
        } else {
            dir(heading)
        };
        let ego_heading = travel[1].atan2(travel[0]);
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let angle = ego_heading + side * rng.gen_range(0.7..2.4);
        let obstacle_speed = rng.gen_range(2.0..6.0);
        scenario
            .obstacles
            .push(crossing_script(target, tc as f64, angle, obstacle_speed, cfg.dt, cfg.steps));
    }

    while scenario.obstacles.len() < cfg.obstacles {
        let mut placed = None;
        for _ in 0..200 {
            let tk = rng.gen_range(0..cfg.steps);
            let base = reference[tk];
            let lateral = rng.gen_range(clearance + 0.5..15.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let along = rng.gen_range(-5.0..5.0);
            let offset = add(scale(dir(heading + PI / 2.0), lateral), scale(dir(heading), along));
            let at = add(base, offset);
            let script = crossing_script(
                at,
                tk as f64,
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.0..6.0),
                cfg.dt,
                cfg.steps,
            );
            if min_distance(&reference, &script) >= clearance {
                placed = Some(script);
                break;
            }
        }
        scenario
            .obstacles
            .push(placed.unwrap_or_else(|| ObstacleScript::stationary(add(reference[0], [100.0, 100.0]))));
    }
    scenario
}

/// Labeled frames of a rollout with camera and ground-truth features.
pub fn frames_from_rollout(id: &str, rollout: &Rollout, rig: &CameraRig) -> Vec<LabeledFrame> {
    let headings = rollout.headings();
    (0..rollout.len())
        .map(|t| {
            let agents = rollout.relative_agents(t);
            let (state_label, control_label) = label_frame(t, rollout.collision_step);
            LabeledFrame {
                traj: id.to_string(),
                t,
                features: rig.features(headings[t], &agents),
                u: rollout.controls[t].to_vec(),
                state_label,
                control_label,
                gt: ground_truth_vector(rollout.ego[t], rollout.ego_velocity(t), &agents),
            }
        })
        .collect()
}

/// The full synthetic dataset for a world configuration and seed.
pub fn generate_dataset(cfg: &WorldConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let rig = CameraRig::new(cfg.cameras, cfg.feature_dim, cfg.camera_range, mix_seed(seed, 0xCA3E));
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5CE4));
    let forced_count = (cfg.collision_fraction * cfg.trajectories as f64).round() as usize;
    let mut forced = vec![false; cfg.trajectories];
    forced.iter_mut().take(forced_count).for_each(|f| *f = true);
    forced.shuffle(&mut rng);

    let trajectories = forced
        .iter()
        .enumerate()
        .map(|(i, &force)| {
            let scenario = sample_scenario(cfg, mix_seed(seed, 1000 + i as u64), force);
            let rollout = generate(&scenario);
            let id = format!("traj{i:04}");
            Trajectory {
                frames: frames_from_rollout(&id, &rollout, &rig),
                id,
            }
        })
        .collect();
    Ok(Dataset {
        meta: DatasetMeta {
            dt: cfg.dt,
            cameras: cfg.cameras,
            feature_dim: cfg.feature_dim,
            control_dim: 2,
            seed,
            config_hash: None,
            tool_version: None,
        },
        trajectories,
    })
}
