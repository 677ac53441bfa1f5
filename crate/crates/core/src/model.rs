//! The assembled perception-to-filter pipeline.
//!
//! Camera (or ground-truth) features are normalized, fused and encoded into
//! a latent state; a method-specific head scores states and actions. The
//! fused variant fuses views before the encoder. The unfused variant keeps
//! one latent state per view and fuses the states right before the head.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataworld::{Dataset, LabeledFrame, Trajectory};
use crate::diffgraph::{Bindings, Expr, Graph, GraphError, ParamStore, Value};
use crate::dynamics::{dyn_loss, residual_step, Dynamics, DynamicsError, StepConfig};
use crate::filter::Halfspace;
use crate::nets::{
    position_encode, BarrierNetwork, ControlAffineDynamics, FusionLayer, HyperplaneNetwork, NetError, ParamMode,
    ResidualDynamics, StateEncoder,
};
use crate::seeds::mix_seed;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("degenerate batch: no {0} samples")]
    DegenerateBatch(&'static str),
    #[error("{0}")]
    Spec(String),
    #[error("non-finite model output: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Idbf,
    Sablas,
    Dh,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Idbf, Method::Sablas, Method::Dh];

    pub fn name(self) -> &'static str {
        match self {
            Method::Idbf => "idbf",
            Method::Sablas => "sablas",
            Method::Dh => "dh",
        }
    }

    /// Whether the method learns a barrier (and therefore scores states).
    pub fn has_barrier(self) -> bool {
        self != Method::Dh
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Camera,
    Gt,
}

impl FeatureSource {
    pub fn name(self) -> &'static str {
        match self {
            FeatureSource::Camera => "camera",
            FeatureSource::Gt => "gt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Fused,
    Unfused,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Fused => "fused",
            Variant::Unfused => "unfused",
        }
    }
}

macro_rules! named_enum {
    ($t:ty, $($v:expr),+) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                [$($v),+]
                    .into_iter()
                    .find(|v| v.name() == s)
                    .ok_or_else(|| format!("unknown value '{s}'"))
            }
        }
    };
}

named_enum!(Method, Method::Idbf, Method::Sablas, Method::Dh);
named_enum!(FeatureSource, FeatureSource::Camera, FeatureSource::Gt);
named_enum!(Variant, Variant::Fused, Variant::Unfused);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub state_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub barrier_hidden: Vec<usize>,
    pub dynamics_hidden: Vec<usize>,
    pub hyperplane_hidden: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            state_dim: 16,
            encoder_hidden: vec![64],
            barrier_hidden: vec![64, 64],
            dynamics_hidden: vec![64, 64],
            hyperplane_hidden: vec![64, 64],
        }
    }
}

/// Per-dimension feature standardization and a scalar control scale, fitted
/// on training frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalizer {
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    pub control_scale: f64,
}

fn raw_views(frame: &LabeledFrame, source: FeatureSource) -> Vec<&[f32]> {
    match source {
        FeatureSource::Camera => frame.features.iter().map(Vec::as_slice).collect(),
        FeatureSource::Gt => vec![frame.gt.as_slice()],
    }
}

impl Normalizer {
    pub fn fit(ds: &Dataset, source: FeatureSource) -> Result<Self> {
        let first = ds
            .frames()
            .next()
            .ok_or_else(|| ModelError::Spec("cannot fit normalization on an empty dataset".into()))?;
        let shape: Vec<usize> = raw_views(first, source).iter().map(|v| v.len()).collect();
        let mut sum: Vec<Vec<f64>> = shape.iter().map(|&d| vec![0.0; d]).collect();
        let mut sq = sum.clone();
        let (mut n, mut usq, mut un) = (0usize, 0.0, 0usize);
        for f in ds.frames() {
            for (k, v) in raw_views(f, source).into_iter().enumerate() {
                for (j, &x) in v.iter().enumerate() {
                    sum[k][j] += x as f64;
                    sq[k][j] += (x as f64) * (x as f64);
                }
            }
            n += 1;
            for &u in &f.u {
                usq += (u as f64) * (u as f64);
                un += 1;
            }
        }
        let n = n as f64;
        let mean: Vec<Vec<f64>> = sum.iter().map(|s| s.iter().map(|v| v / n).collect()).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                s.iter()
                    .zip(m)
                    .map(|(q, mu)| {
                        let sd = (q / n - mu * mu).max(0.0).sqrt();
                        if sd > 1e-6 {
                            sd
                        } else {
                            1.0
                        }
                    })
                    .collect()
            })
            .collect();
        let rms = (usq / un.max(1) as f64).sqrt();
        Ok(Self {
            mean,
            std,
            control_scale: if rms > 1e-6 { rms } else { 1.0 },
        })
    }

    pub fn views(&self) -> usize {
        self.mean.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.mean.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub method: Method,
    pub features: FeatureSource,
    pub variant: Variant,
    pub views: usize,
    pub feature_dim: usize,
    pub control_dim: usize,
    pub arch: ArchConfig,
    pub alpha: f64,
    pub step: StepConfig,
    pub normalizer: Normalizer,
}

/// Network structure for a spec; parameters live in a separate store.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub spec: ModelSpec,
    pub fusion: Option<FusionLayer>,
    pub encoder: StateEncoder,
    pub state_fusion: Option<FusionLayer>,
    pub dynamics: Option<Dynamics>,
    pub barrier: Option<BarrierNetwork>,
    pub hyperplane: Option<HyperplaneNetwork>,
}

/// Latent states of a batch of windows.
pub struct Encoded {
    /// `streams[k][t]`: one stream for the fused variant, one per view otherwise.
    pub streams: Vec<Vec<Expr>>,
}

impl Encoded {
    pub fn horizon(&self) -> usize {
        self.streams[0].len()
    }

    pub fn at(&self, t: usize) -> Vec<Expr> {
        self.streams.iter().map(|s| s[t]).collect()
    }

    /// Each stream's states over `range`, stacked by rows.
    pub fn stacked(&self, g: &mut Graph, range: std::ops::Range<usize>) -> Result<Vec<Expr>> {
        self.streams
            .iter()
            .map(|s| Ok(g.vcat(&s[range.clone()])?))
            .collect()
    }
}

/// Window inputs: `views[t][k]` is `rows x feature_dim`, `controls[t]` is
/// `rows x control_dim` in normalized units.
pub struct WindowInputs {
    pub views: Vec<Vec<Value>>,
    pub controls: Vec<Value>,
}

impl Pipeline {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let (n, m, d, views) = (spec.arch.state_dim, spec.control_dim, spec.feature_dim, spec.views);
        let annotated = d + views;
        let (fusion, state_fusion, head_dim) = match spec.variant {
            Variant::Fused => (Some(FusionLayer::new("fusion", views, d)?), None, n),
            Variant::Unfused => {
                let sf = FusionLayer::new("state_fusion", views, n)?;
                let out = sf.output_dim();
                (None, Some(sf), out)
            }
        };
        let encoder = StateEncoder::new(annotated, n, m, &spec.arch.encoder_hidden)?;
        let hidden = &spec.arch.dynamics_hidden;
        let dynamics = match spec.method {
            Method::Idbf => Some(Dynamics::ControlAffine(ControlAffineDynamics::new(n, m, hidden)?)),
            Method::Sablas => Some(Dynamics::Residual(ResidualDynamics::new(n, m, hidden)?)),
            Method::Dh => None,
        };
        let barrier = match spec.method.has_barrier() {
            true => Some(BarrierNetwork::new(head_dim, &spec.arch.barrier_hidden)?),
            false => None,
        };
        let hyperplane = match spec.method {
            Method::Dh => Some(HyperplaneNetwork::new(head_dim, m, &spec.arch.hyperplane_hidden)?),
            _ => None,
        };
        Ok(Self {
            spec,
            fusion,
            encoder,
            state_fusion,
            dynamics,
            barrier,
            hyperplane,
        })
    }

    /// Seeded parameter initialization, in a fixed network order.
    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x1A17));
        let mut store = ParamStore::new();
        if let Some(f) = &self.fusion {
            f.init_into(&mut store, &mut rng);
        }
        self.encoder.mlp.init_into(&mut store, &mut rng);
        if let Some(f) = &self.state_fusion {
            f.init_into(&mut store, &mut rng);
        }
        match &self.dynamics {
            Some(Dynamics::ControlAffine(d)) => d.init_into(&mut store, &mut rng),
            Some(Dynamics::Residual(d)) => d.net.init_into(&mut store, &mut rng),
            None => {}
        }
        if let Some(b) = &self.barrier {
            b.mlp.init_into(&mut store, &mut rng);
        }
        if let Some(h) = &self.hyperplane {
            h.init_into(&mut store, &mut rng);
        }
        store
    }

    /// Normalized window inputs for `frames[i][t]` (each window the same length).
    pub fn window_inputs(&self, windows: &[&[LabeledFrame]]) -> Result<WindowInputs> {
        let horizon = windows.first().map_or(0, |w| w.len());
        let norm = &self.spec.normalizer;
        let rows = windows.len();
        let mut views = Vec::with_capacity(horizon);
        let mut controls = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let mut per_view = Vec::with_capacity(self.spec.views);
            for k in 0..self.spec.views {
                let (mean, std) = (&norm.mean[k], &norm.std[k]);
                let mut v = Value::zeros((rows, self.spec.feature_dim));
                for (i, w) in windows.iter().enumerate() {
                    let raw = raw_views(&w[t], self.spec.features);
                    let src = raw.get(k).ok_or_else(|| ModelError::Spec("view count mismatch".into()))?;
                    if src.len() != self.spec.feature_dim {
                        return Err(ModelError::Spec(format!(
                            "feature width {} does not match model width {}",
                            src.len(),
                            self.spec.feature_dim
                        )));
                    }
                    for j in 0..src.len() {
                        v[[i, j]] = (src[j] as f64 - mean[j]) / std[j];
                    }
                }
                per_view.push(v);
            }
            views.push(per_view);
            let mut u = Value::zeros((rows, self.spec.control_dim));
            for (i, w) in windows.iter().enumerate() {
                for (j, &x) in w[t].u.iter().enumerate().take(self.spec.control_dim) {
                    u[[i, j]] = x as f64 / norm.control_scale;
                }
            }
            controls.push(u);
        }
        Ok(WindowInputs { views, controls })
    }

    fn annotate(&self, g: &mut Graph, h: Expr, view: usize) -> Result<Expr> {
        let rows = g.shape(h).0;
        let code = position_encode(view, self.spec.views)?;
        let code = g.constant_row(&code);
        let codes = g.broadcast_rows(code, rows)?;
        Ok(g.hcat(&[h, codes])?)
    }

    pub fn encode(&self, g: &mut Graph, inputs: &WindowInputs, controls: &[Expr], mode: ParamMode) -> Result<Encoded> {
        let horizon = inputs.views.len();
        let streams = match &self.fusion {
            Some(fusion) => {
                let mut fused = Vec::with_capacity(horizon);
                for views in &inputs.views {
                    let hs: Vec<Expr> = views.iter().map(|v| g.constant(v.clone())).collect();
                    fused.push(fusion.fuse(g, &hs, mode)?);
                }
                vec![self.encoder.encode_sequence(g, &fused, controls, mode)?]
            }
            None => {
                let mut streams = Vec::with_capacity(self.spec.views);
                for k in 0..self.spec.views {
                    let mut annotated = Vec::with_capacity(horizon);
                    for views in &inputs.views {
                        let h = g.constant(views[k].clone());
                        annotated.push(self.annotate(g, h, k + 1)?);
                    }
                    streams.push(self.encoder.encode_sequence(g, &annotated, controls, mode)?);
                }
                streams
            }
        };
        Ok(Encoded { streams })
    }

    /// Head input from per-stream states.
    pub fn head(&self, g: &mut Graph, states: &[Expr], mode: ParamMode) -> Result<Expr> {
        match &self.state_fusion {
            Some(sf) => Ok(sf.fuse(g, states, mode)?),
            None => Ok(states[0]),
        }
    }

    /// Head input and its derivative along per-stream state tangents.
    pub fn head_with_tangent(&self, g: &mut Graph, states: &[Expr], tangents: &[Expr], mode: ParamMode) -> Result<(Expr, Expr)> {
        match &self.state_fusion {
            Some(sf) => {
                let (z, dz) = sf.fuse_with_tangent(g, states, Some(tangents), mode)?;
                Ok((z, dz.expect("tangents given")))
            }
            None => Ok((states[0], tangents[0])),
        }
    }

    /// Dynamics prediction error averaged over streams.
    pub fn dyn_loss(&self, g: &mut Graph, enc: &Encoded, controls: &[Expr], mode: ParamMode) -> Result<Option<Expr>> {
        let Some(dynamics) = &self.dynamics else {
            return Ok(None);
        };
        let mut acc: Option<Expr> = None;
        for s in &enc.streams {
            let l = dyn_loss(g, dynamics, s, controls, &self.spec.step, mode)?;
            acc = Some(match acc {
                Some(a) => g.add(a, l)?,
                None => l,
            });
        }
        let acc = acc.expect("at least one stream");
        Ok(Some(g.scale(acc, 1.0 / enc.streams.len() as f64)))
    }

    /// State score `B(z)` (barrier methods) and action score for states
    /// `states` (one per stream) under controls `u`.
    pub fn scores(&self, g: &mut Graph, states: &[Expr], u: Expr, mode: ParamMode) -> Result<(Option<Expr>, Expr)> {
        let alpha = self.spec.alpha;
        match (&self.dynamics, &self.barrier, &self.hyperplane) {
            (Some(Dynamics::ControlAffine(d)), Some(barrier), _) => {
                let mut tangents = Vec::with_capacity(states.len());
                for &x in states {
                    tangents.push(d.vector_field(g, x, u, mode)?);
                }
                let (z, dz) = self.head_with_tangent(g, states, &tangents, mode)?;
                let (b, ascent) = crate::training::lie_ascent(g, barrier, z, dz, alpha, mode)?;
                Ok((Some(b), ascent))
            }
            (Some(Dynamics::Residual(d)), Some(barrier), _) => {
                let z = self.head(g, states, mode)?;
                let b = barrier.forward(g, z, mode)?;
                let mut next = Vec::with_capacity(states.len());
                for &x in states {
                    next.push(residual_step(g, d, x, u, &self.spec.step, mode)?);
                }
                let zn = self.head(g, &next, mode)?;
                let bn = barrier.forward(g, zn, mode)?;
                let ascent = crate::training::difference_ascent(g, b, bn, self.spec.step.dt, alpha)?;
                Ok((Some(b), ascent))
            }
            (None, None, Some(hp)) => {
                let z = self.head(g, states, mode)?;
                Ok((None, hp.margin(g, z, u, mode)?))
            }
            _ => Err(ModelError::Spec("inconsistent pipeline".into())),
        }
    }
}

/// Scores of one recorded frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameScore {
    pub traj: String,
    pub t: usize,
    pub state: Option<f64>,
    pub action: f64,
    /// Admissible recorded-unit controls `{u : a^T u >= b}` at this state.
    pub halfspace: Halfspace,
}

pub const CHECKPOINT_FORMAT: u32 = 1;

/// A trained pipeline: spec plus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetyModel {
    pub format: u32,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub spec: ModelSpec,
    pub params: ParamStore,
}

impl SafetyModel {
    pub fn pipeline(&self) -> Result<Pipeline> {
        Pipeline::new(self.spec.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: SafetyModel = serde_json::from_str(text)?;
        if model.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Spec(format!("unsupported checkpoint format {}", model.format)));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checks that a dataset's features fit this model.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let (views, dim) = match self.spec.features {
            FeatureSource::Camera => (ds.meta.cameras, ds.meta.feature_dim),
            FeatureSource::Gt => (1, ds.gt_dim().unwrap_or(self.spec.feature_dim)),
        };
        if views != self.spec.views || dim != self.spec.feature_dim || ds.meta.control_dim != self.spec.control_dim {
            return Err(ModelError::Spec(format!(
                "model expects {} views of width {} and {} controls, data has {} views of width {} and {} controls",
                self.spec.views, self.spec.feature_dim, self.spec.control_dim, views, dim, ds.meta.control_dim
            )));
        }
        Ok(())
    }

    /// Scores every frame of the trajectories. Frame `t` is encoded from the
    /// window of up to `horizon` frames ending at `t`, starting from a zero
    /// state, and probed at its recorded control.
    pub fn score_trajectories(&self, trajectories: &[Trajectory]) -> Result<Vec<FrameScore>> {
        let pipeline = self.pipeline()?;
        let horizon = self.spec.step.horizon;
        let m = self.spec.control_dim;
        let scale = self.spec.normalizer.control_scale;
        let delta = match self.spec.method {
            Method::Sablas => 1e-4,
            _ => 1.0,
        };
        let mut out: Vec<Option<FrameScore>> = Vec::new();
        let mut groups: Vec<Vec<(usize, &[LabeledFrame])>> = vec![Vec::new(); horizon + 1];
        for traj in trajectories {
            for t in 0..traj.len() {
                let len = (t + 1).min(horizon);
                groups[len].push((out.len(), &traj.frames[t + 1 - len..=t]));
                out.push(None);
            }
        }
        for group in groups.iter().filter(|g| !g.is_empty()) {
            for chunk in group.chunks(512) {
                let windows: Vec<&[LabeledFrame]> = chunk.iter().map(|c| c.1).collect();
                let inputs = pipeline.window_inputs(&windows)?;
                let rows = windows.len();
                let mut g = Graph::new();
                let controls: Vec<Expr> = inputs.controls.iter().map(|u| g.constant(u.clone())).collect();
                let enc = pipeline.encode(&mut g, &inputs, &controls, ParamMode::Frozen)?;
                let last = enc.at(enc.horizon() - 1);
                // Probes: recorded control, zero, then delta along each axis.
                let probes = m + 2;
                let mut reps = Vec::with_capacity(last.len());
                for &x in &last {
                    let copies = vec![x; probes];
                    reps.push(g.vcat(&copies)?);
                }
                let mut u = Value::zeros((rows * probes, m));
                u.slice_mut(ndarray::s![..rows, ..]).assign(&inputs.controls[inputs.controls.len() - 1]);
                for j in 0..m {
                    for i in 0..rows {
                        u[[(2 + j) * rows + i, j]] = delta / scale;
                    }
                }
                let u = g.constant(u);
                let (state, action) = pipeline.scores(&mut g, &reps, u, ParamMode::Frozen)?;
                let mut roots = vec![action];
                roots.extend(state);
                let values = g.evaluate_many(&roots, &self.params, &Bindings::new())?;
                let action = &values[0];
                if action.iter().any(|v| !v.is_finite()) {
                    return Err(ModelError::NonFinite("action score".into()));
                }
                for (i, &(slot, w)) in chunk.iter().enumerate() {
                    let s0 = action[[rows + i, 0]];
                    let a = (0..m).map(|j| (action[[(2 + j) * rows + i, 0]] - s0) / delta).collect();
                    let frame = &w[w.len() - 1];
                    out[slot] = Some(FrameScore {
                        traj: frame.traj.clone(),
                        t: frame.t,
                        state: values.get(1).map(|s| s[[i, 0]]),
                        action: action[[i, 0]],
                        halfspace: Halfspace { a, b: -s0 },
                    });
                }
            }
        }
        Ok(out.into_iter().map(|s| s.expect("every frame scored")).collect())
    }
}
