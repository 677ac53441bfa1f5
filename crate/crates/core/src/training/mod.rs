//! Seeded training of the three filter families over oversampled windows.

mod losses;

pub use losses::{
    barrier_hinges, dh_hinges, dh_loss, difference_ascent, idbf_loss, lie_ascent, sablas_loss, FrameLabel, LossConfig,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataworld::segments::segment_dataset;
use crate::dataworld::{sample_epoch, Category, Dataset, LabeledFrame, SamplingConfig, SubTrajectory};
use crate::diffgraph::{AdamConfig, Bindings, Expr, Graph};
use crate::dynamics::{residual_step, sablas_correct, Dynamics, StepConfig};
use crate::model::{
    ArchConfig, Encoded, FeatureSource, Method, ModelError, ModelSpec, Normalizer, Pipeline, SafetyModel, Variant,
    CHECKPOINT_FORMAT,
};
use crate::nets::ParamMode;
use crate::seeds::mix_seed;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training diverged in epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
    #[error("no training windows: {0}")]
    NoData(String),
}

macro_rules! via_model {
    ($($t:ty),+) => {$(
        impl From<$t> for TrainError {
            fn from(e: $t) -> Self {
                TrainError::Model(e.into())
            }
        }
    )+};
}

via_model!(crate::diffgraph::GraphError, crate::nets::NetError, crate::dynamics::DynamicsError);

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Dynamics-only epochs before the barrier loss joins (ignored by dh).
    pub warmup_epochs: usize,
    pub joint_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 20,
            joint_epochs: 80,
            batch_size: 64,
            learning_rate: 1e-3,
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub method: Method,
    pub features: FeatureSource,
    pub variant: Variant,
    pub seed: u64,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub step: StepConfig,
    pub arch: ArchConfig,
    pub sampling: SamplingConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Joint,
}

/// Mean losses over one epoch's batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub phase: Phase,
    pub dynamics: Option<f64>,
    pub barrier: Option<f64>,
    pub total: f64,
}

/// Splits a shuffled epoch into batches that each hold at least one window
/// of every category present.
pub fn stratified_batches(epoch: &[SubTrajectory], batch_size: usize) -> Vec<Vec<SubTrajectory>> {
    if epoch.is_empty() {
        return Vec::new();
    }
    let groups: Vec<Vec<SubTrajectory>> = Category::ALL
        .iter()
        .map(|c| epoch.iter().copied().filter(|s| s.category == *c).collect::<Vec<_>>())
        .filter(|g| !g.is_empty())
        .collect();
    let smallest = groups.iter().map(Vec::len).min().unwrap_or(1);
    let nb = epoch.len().div_ceil(batch_size.max(1)).min(smallest).max(1);
    let mut batches = vec![Vec::new(); nb];
    for group in &groups {
        for (j, s) in group.iter().enumerate() {
            batches[j % nb].push(*s);
        }
    }
    batches
}

fn labels_t_major(windows: &[&[LabeledFrame]], range: std::ops::Range<usize>) -> Vec<FrameLabel> {
    range
        .flat_map(|t| windows.iter().map(move |w| FrameLabel::new(w[t].state_label, w[t].control_label)))
        .collect()
}

/// Method-specific filter loss over every frame of a window batch.
pub fn window_filter_loss(
    pipeline: &Pipeline,
    g: &mut Graph,
    enc: &Encoded,
    controls: &[Expr],
    windows: &[&[LabeledFrame]],
    cfg: &LossConfig,
) -> Result<Expr> {
    let horizon = enc.horizon();
    let all = labels_t_major(windows, 0..horizon);
    let states = enc.stacked(g, 0..horizon)?;
    let u = g.vcat(controls)?;
    let loss = match (&pipeline.dynamics, &pipeline.barrier, &pipeline.hyperplane) {
        (Some(Dynamics::ControlAffine(d)), Some(barrier), _) => {
            let mut tangents = Vec::with_capacity(states.len());
            for &x in &states {
                tangents.push(d.vector_field(g, x, u, ParamMode::Frozen)?);
            }
            let (z, dz) = pipeline.head_with_tangent(g, &states, &tangents, ParamMode::Trainable)?;
            let (b, ascent) = lie_ascent(g, barrier, z, dz, cfg.alpha, ParamMode::Trainable)?;
            barrier_hinges(g, b, &all, ascent, &all, cfg)?
        }
        (Some(Dynamics::Residual(d)), Some(barrier), _) => {
            if horizon < 2 {
                return Err(ModelError::Spec("finite-difference ascent needs a next state".into()).into());
            }
            let cur = enc.stacked(g, 0..horizon - 1)?;
            let next = enc.stacked(g, 1..horizon)?;
            let u_cur = g.vcat(&controls[..horizon - 1])?;
            let mut corrected = Vec::with_capacity(cur.len());
            for (&x, &xn) in cur.iter().zip(&next) {
                let pred = residual_step(g, d, x, u_cur, &pipeline.spec.step, ParamMode::Frozen)?;
                corrected.push(sablas_correct(g, pred, xn)?);
            }
            let z_all = pipeline.head(g, &states, ParamMode::Trainable)?;
            let b_all = barrier.forward(g, z_all, ParamMode::Trainable)?;
            let z_cur = pipeline.head(g, &cur, ParamMode::Trainable)?;
            let b_cur = barrier.forward(g, z_cur, ParamMode::Trainable)?;
            let z_bar = pipeline.head(g, &corrected, ParamMode::Trainable)?;
            let b_bar = barrier.forward(g, z_bar, ParamMode::Trainable)?;
            let ascent = difference_ascent(g, b_cur, b_bar, pipeline.spec.step.dt, cfg.alpha)?;
            let cur_labels = labels_t_major(windows, 0..horizon - 1);
            barrier_hinges(g, b_all, &all, ascent, &cur_labels, cfg)?
        }
        (None, None, Some(hp)) => {
            let z = pipeline.head(g, &states, ParamMode::Trainable)?;
            let margin = hp.margin(g, z, u, ParamMode::Trainable)?;
            dh_hinges(g, margin, &all, cfg)?
        }
        _ => return Err(ModelError::Spec("inconsistent pipeline".into()).into()),
    };
    Ok(loss)
}

/// Trains one model on `train_set`. Returns the model and per-epoch losses.
pub fn train(run: &TrainRun, train_set: &Dataset, config_hash: &str) -> Result<(SafetyModel, Vec<EpochLoss>)> {
    run.loss.validate()?;
    run.step.validate()?;
    if run.train.batch_size == 0 {
        return Err(ModelError::Spec("batch size must be positive".into()).into());
    }
    let normalizer = Normalizer::fit(train_set, run.features)?;
    let spec = ModelSpec {
        method: run.method,
        features: run.features,
        variant: run.variant,
        views: normalizer.views(),
        feature_dim: normalizer.feature_dim(),
        control_dim: train_set.meta.control_dim,
        arch: run.arch.clone(),
        alpha: run.loss.alpha,
        step: run.step,
        normalizer,
    };
    let pipeline = Pipeline::new(spec.clone())?;
    let mut params = pipeline.init(run.seed);
    let adam = AdamConfig {
        lr: run.train.learning_rate,
        ..AdamConfig::default()
    };
    let segments = segment_dataset(train_set, run.step.horizon);
    let warmup = if pipeline.dynamics.is_some() { run.train.warmup_epochs } else { 0 };
    let epochs = warmup + run.train.joint_epochs;
    let mut history = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        let phase = if epoch < warmup { Phase::Warmup } else { Phase::Joint };
        let mut list = sample_epoch(&segments, &run.sampling, mix_seed(run.seed, 0xE90C + epoch as u64));
        if list.is_empty() {
            return Err(TrainError::NoData(format!("{} trajectories yield no windows", train_set.trajectories.len())));
        }
        list.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(run.seed, 0xBA7C + epoch as u64)));
        let batches = stratified_batches(&list, run.train.batch_size);
        let (mut sum_dyn, mut sum_bar, mut sum_total) = (0.0, 0.0, 0.0);
        for batch in &batches {
            let windows: Vec<&[LabeledFrame]> = batch.iter().map(|s| s.frames(train_set)).collect();
            let inputs = pipeline.window_inputs(&windows)?;
            let mut g = Graph::new();
            let controls: Vec<Expr> = inputs.controls.iter().map(|u| g.constant(u.clone())).collect();
            let enc = pipeline.encode(&mut g, &inputs, &controls, ParamMode::Trainable)?;
            let dyn_term = pipeline.dyn_loss(&mut g, &enc, &controls, ParamMode::Trainable)?;
            let bar_term = match phase {
                Phase::Joint => Some(window_filter_loss(&pipeline, &mut g, &enc, &controls, &windows, &run.loss)?),
                Phase::Warmup => None,
            };
            let root = match (dyn_term, bar_term) {
                (Some(a), Some(b)) => g.add(a, b)?,
                (Some(a), None) => a,
                (None, Some(b)) => b,
                (None, None) => unreachable!("every method has a loss"),
            };
            let extras: Vec<Expr> = dyn_term.into_iter().chain(bar_term).collect();
            let (total, grads, values) = g
                .value_and_gradient_with(root, &extras, &params, &Bindings::new())
                .map_err(|e| TrainError::Divergence {
                    epoch,
                    detail: e.to_string(),
                })?;
            if !total.is_finite() || !grads.is_finite() {
                return Err(TrainError::Divergence {
                    epoch,
                    detail: format!("non-finite loss {total}"),
                });
            }
            let mut k = 0;
            if dyn_term.is_some() {
                sum_dyn += values[k][[0, 0]];
                k += 1;
            }
            if bar_term.is_some() {
                sum_bar += values[k][[0, 0]];
            }
            sum_total += total;
            params.adam_step(&grads, &adam)?;
        }
        let n = batches.len() as f64;
        let entry = EpochLoss {
            epoch,
            phase,
            dynamics: pipeline.dynamics.as_ref().map(|_| sum_dyn / n),
            barrier: (phase == Phase::Joint).then_some(sum_bar / n),
            total: sum_total / n,
        };
        log::debug!("epoch {epoch} {:?} loss {:.6}", phase, entry.total);
        history.push(entry);
    }

    let model = SafetyModel {
        format: CHECKPOINT_FORMAT,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: config_hash.to_string(),
        seed: run.seed,
        spec,
        params,
    };
    Ok((model, history))
}
