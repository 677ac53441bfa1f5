//! Learned-dynamics propagation: fixed-step RK4 over a control-affine
//! vector field, the discrete residual step with its detached correction,
//! and the one-step prediction loss.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffgraph::{Expr, Graph, GraphError};
use crate::nets::{ControlAffineDynamics, NetError, ParamMode, ResidualDynamics};

/// Any state component above this magnitude aborts integration.
pub const DIVERGENCE_BOUND: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("window of {0} frames is too short, need at least 2")]
    ShortWindow(usize),
    #[error("invalid step config: {0}")]
    Config(String),
}

impl From<GraphError> for DynamicsError {
    fn from(e: GraphError) -> Self {
        DynamicsError::Net(NetError::Graph(e))
    }
}

pub type Result<T, E = DynamicsError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepConfig {
    /// Sampling period in seconds.
    pub dt: f64,
    /// RK4 substeps per sampling period.
    pub substeps: usize,
    /// Frames per sub-trajectory.
    pub horizon: usize,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            substeps: 1,
            horizon: 5,
        }
    }
}

impl StepConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(DynamicsError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.substeps == 0 {
            return Err(DynamicsError::Config("substeps must be >= 1".into()));
        }
        if self.horizon < 2 {
            return Err(DynamicsError::Config("horizon must be >= 2".into()));
        }
        Ok(())
    }
}

/// Classical RK4 over `dt` with `u` held constant, split into `substeps`.
pub fn ode_step(
    g: &mut Graph,
    dynamics: &ControlAffineDynamics,
    x: Expr,
    u: Expr,
    cfg: &StepConfig,
    mode: ParamMode,
) -> Result<Expr> {
    cfg.validate()?;
    let h = cfg.dt / cfg.substeps as f64;
    let mut x = x;
    for _ in 0..cfg.substeps {
        let k1 = dynamics.vector_field(g, x, u, mode)?;
        let s1 = g.scale(k1, 0.5 * h);
        let x2 = g.add(x, s1)?;
        g.guard(x2, DIVERGENCE_BOUND);
        let k2 = dynamics.vector_field(g, x2, u, mode)?;
        let s2 = g.scale(k2, 0.5 * h);
        let x3 = g.add(x, s2)?;
        g.guard(x3, DIVERGENCE_BOUND);
        let k3 = dynamics.vector_field(g, x3, u, mode)?;
        let s3 = g.scale(k3, h);
        let x4 = g.add(x, s3)?;
        g.guard(x4, DIVERGENCE_BOUND);
        let k4 = dynamics.vector_field(g, x4, u, mode)?;

        let k2x2 = g.scale(k2, 2.0);
        let k3x2 = g.scale(k3, 2.0);
        let a = g.add(k1, k2x2)?;
        let b = g.add(k3x2, k4)?;
        let sum = g.add(a, b)?;
        let incr = g.scale(sum, h / 6.0);
        x = g.add(x, incr)?;
        g.guard(x, DIVERGENCE_BOUND);
    }
    Ok(x)
}

/// `x + f(x, u) dt`.
pub fn residual_step(
    g: &mut Graph,
    dynamics: &ResidualDynamics,
    x: Expr,
    u: Expr,
    cfg: &StepConfig,
    mode: ParamMode,
) -> Result<Expr> {
    let rate = dynamics.rate(g, x, u, mode)?;
    let incr = g.scale(rate, cfg.dt);
    let next = g.add(x, incr)?;
    g.guard(next, DIVERGENCE_BOUND);
    Ok(next)
}

/// Correction of a predicted next state toward the observed one.
///
/// Evaluates to exactly `actual` while its gradient is that of `predicted`:
/// `detach(actual) + (predicted - detach(predicted))`, which equals
/// `predicted + detach(actual - predicted)` and keeps the value bit-exact.
pub fn sablas_correct(g: &mut Graph, predicted: Expr, actual: Expr) -> Result<Expr> {
    let (sp, sa) = (g.shape(predicted), g.shape(actual));
    if sp != sa {
        return Err(GraphError::Shape {
            op: "sablas_correct",
            lhs: sp,
            rhs: sa,
        }
        .into());
    }
    let fixed = g.detach(actual);
    let frozen_pred = g.detach(predicted);
    let zero_valued = g.sub(predicted, frozen_pred)?;
    Ok(g.add(fixed, zero_valued)?)
}

/// The two learned-dynamics families.
#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    ControlAffine(ControlAffineDynamics),
    Residual(ResidualDynamics),
}

impl Dynamics {
    pub fn state_dim(&self) -> usize {
        match self {
            Dynamics::ControlAffine(d) => d.state_dim,
            Dynamics::Residual(d) => d.state_dim,
        }
    }

    pub fn control_dim(&self) -> usize {
        match self {
            Dynamics::ControlAffine(d) => d.control_dim,
            Dynamics::Residual(d) => d.control_dim,
        }
    }

    /// Predicted state after one sampling period.
    pub fn step(&self, g: &mut Graph, x: Expr, u: Expr, cfg: &StepConfig, mode: ParamMode) -> Result<Expr> {
        match self {
            Dynamics::ControlAffine(d) => ode_step(g, d, x, u, cfg, mode),
            Dynamics::Residual(d) => residual_step(g, d, x, u, cfg, mode),
        }
    }
}

/// Mean over rows of `(1/T) sum_{t=1}^{T-1} |x~_t - x_t|^2`, where
/// `x~_t` is stepped from `x_{t-1}` under `u_{t-1}`.
///
/// `states[t]` and `controls[t]` hold one row per sub-trajectory.
pub fn dyn_loss(
    g: &mut Graph,
    dynamics: &Dynamics,
    states: &[Expr],
    controls: &[Expr],
    cfg: &StepConfig,
    mode: ParamMode,
) -> Result<Expr> {
    let horizon = states.len();
    if horizon < 2 {
        return Err(DynamicsError::ShortWindow(horizon));
    }
    if controls.len() < horizon - 1 {
        return Err(DynamicsError::Config(format!(
            "{} controls for {} states",
            controls.len(),
            horizon
        )));
    }
    let rows = g.shape(states[0]).0;
    let mut terms = Vec::with_capacity(horizon - 1);
    for t in 1..horizon {
        let pred = dynamics.step(g, states[t - 1], controls[t - 1], cfg, mode)?;
        let diff = g.sub(pred, states[t])?;
        terms.push(g.square(diff));
    }
    let stacked = g.vcat(&terms)?;
    let total = g.sum(stacked);
    Ok(g.scale(total, 1.0 / (horizon as f64 * rows as f64)))
}
