//! Hinge losses of the three filter families.
//!
//! Every hinge is `max(0, .)`; each term is averaged over its own
//! population. States come in as graph rows, one sample per row.

use serde::{Deserialize, Serialize};

use crate::dataworld::Safety;
use crate::diffgraph::{Expr, Graph, Value};
use crate::dynamics::{residual_step, sablas_correct, StepConfig};
use crate::model::{ModelError, Result};
use crate::nets::{BarrierNetwork, ControlAffineDynamics, HyperplaneNetwork, ParamMode, ResidualDynamics};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub w_safe: f64,
    pub w_unsafe: f64,
    pub w_ascent: f64,
    pub eps_safe: f64,
    pub eps_unsafe: f64,
    pub eps_ascent: f64,
    /// Slope of the linear class-K function `gamma(s) = alpha s`.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            w_safe: 1.0,
            w_unsafe: 1.0,
            w_ascent: 1.0,
            eps_safe: 0.1,
            eps_unsafe: 0.1,
            eps_ascent: 0.1,
            alpha: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.w_safe,
            self.w_unsafe,
            self.w_ascent,
            self.eps_safe,
            self.eps_unsafe,
            self.eps_ascent,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ModelError::Spec("loss weights and margins must be finite and nonnegative".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(ModelError::Spec("alpha must be positive".into()));
        }
        Ok(())
    }
}

/// State and control labels of one sample row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameLabel {
    pub state: Safety,
    pub control: Safety,
}

impl FrameLabel {
    pub fn new(state: Safety, control: Safety) -> Self {
        Self { state, control }
    }
}

/// `w / N * sum_{rows selected} relu(arg)`; errors on an empty selection
/// unless the weight is zero.
fn masked_hinge(g: &mut Graph, arg: Expr, select: &[bool], weight: f64, what: &'static str) -> Result<Option<Expr>> {
    if weight == 0.0 {
        return Ok(None);
    }
    let count = select.iter().filter(|&&s| s).count();
    if count == 0 {
        return Err(ModelError::DegenerateBatch(what));
    }
    let mask = Value::from_shape_fn((select.len(), 1), |(i, _)| if select[i] { 1.0 } else { 0.0 });
    let mask = g.constant(mask);
    let h = g.relu(arg);
    let picked = g.hadamard(mask, h)?;
    let total = g.sum(picked);
    Ok(Some(g.scale(total, weight / count as f64)))
}

fn shift(g: &mut Graph, e: Expr, c: f64) -> Result<Expr> {
    let s = g.shape(e);
    let k = g.filled(s, c);
    Ok(g.add(e, k)?)
}

fn total(g: &mut Graph, terms: Vec<Option<Expr>>) -> Result<Expr> {
    let mut acc: Option<Expr> = None;
    for t in terms.into_iter().flatten() {
        acc = Some(match acc {
            Some(a) => g.add(a, t)?,
            None => t,
        });
    }
    Ok(acc.unwrap_or_else(|| g.filled((1, 1), 0.0)))
}

/// Safe and unsafe state hinges over `b` (one row per `labels` entry),
/// plus the ascent hinge `relu(eps_ascent - ascent)` over the rows of
/// `ascent` whose control is labeled safe.
pub fn barrier_hinges(
    g: &mut Graph,
    b: Expr,
    labels: &[FrameLabel],
    ascent: Expr,
    ascent_labels: &[FrameLabel],
    cfg: &LossConfig,
) -> Result<Expr> {
    check_rows(g, b, labels.len())?;
    check_rows(g, ascent, ascent_labels.len())?;
    let safe: Vec<bool> = labels.iter().map(|l| l.state.is_safe()).collect();
    let unsafe_: Vec<bool> = safe.iter().map(|s| !s).collect();
    let ascent_safe: Vec<bool> = ascent_labels
        .iter()
        .map(|l| l.state.is_safe() && l.control.is_safe())
        .collect();

    let nb = g.neg(b);
    let safe_arg = shift(g, nb, cfg.eps_safe)?;
    let unsafe_arg = shift(g, b, cfg.eps_unsafe)?;
    let na = g.neg(ascent);
    let ascent_arg = shift(g, na, cfg.eps_ascent)?;
    let terms = vec![
        masked_hinge(g, safe_arg, &safe, cfg.w_safe, "safe-state")?,
        masked_hinge(g, unsafe_arg, &unsafe_, cfg.w_unsafe, "unsafe-state")?,
        masked_hinge(g, ascent_arg, &ascent_safe, cfg.w_ascent, "safe-control")?,
    ];
    total(g, terms)
}

fn check_rows(g: &Graph, e: Expr, rows: usize) -> Result<()> {
    let s = g.shape(e);
    if s.0 != rows || s.1 != 1 {
        return Err(ModelError::Spec(format!("expected {rows}x1 scores, got {}x{}", s.0, s.1)));
    }
    Ok(())
}

/// `grad B(z) . z_dot + alpha B(z)` with the barrier value, for each row.
pub fn lie_ascent(g: &mut Graph, barrier: &BarrierNetwork, z: Expr, z_dot: Expr, alpha: f64, mode: ParamMode) -> Result<(Expr, Expr)> {
    let (b, grad) = barrier.forward_with_gradient(g, z, mode)?;
    let lie = g.row_dot(grad, z_dot)?;
    let gb = g.scale(b, alpha);
    Ok((b, g.add(lie, gb)?))
}

/// `(B(z_next) - B(z)) / dt + alpha B(z)`.
pub fn difference_ascent(g: &mut Graph, b: Expr, b_next: Expr, dt: f64, alpha: f64) -> Result<Expr> {
    let diff = g.sub(b_next, b)?;
    let rate = g.scale(diff, 1.0 / dt);
    let gb = g.scale(b, alpha);
    Ok(g.add(rate, gb)?)
}

/// Barrier loss with the continuous-time ascent condition. The dynamics
/// enter frozen; gradient flows into the barrier and the states.
pub fn idbf_loss(
    g: &mut Graph,
    barrier: &BarrierNetwork,
    dynamics: &ControlAffineDynamics,
    x: Expr,
    u: Expr,
    labels: &[FrameLabel],
    cfg: &LossConfig,
) -> Result<Expr> {
    let x_dot = dynamics.vector_field(g, x, u, ParamMode::Frozen)?;
    let (b, ascent) = lie_ascent(g, barrier, x, x_dot, cfg.alpha, ParamMode::Trainable)?;
    barrier_hinges(g, b, labels, ascent, labels, cfg)
}

/// Barrier loss with the finite-difference ascent surrogate. The next state
/// is the residual prediction corrected onto `x_next`.
#[allow(clippy::too_many_arguments)]
pub fn sablas_loss(
    g: &mut Graph,
    barrier: &BarrierNetwork,
    dynamics: &ResidualDynamics,
    x: Expr,
    u: Expr,
    x_next: Expr,
    labels: &[FrameLabel],
    cfg: &LossConfig,
    step: &StepConfig,
) -> Result<Expr> {
    let pred = residual_step(g, dynamics, x, u, step, ParamMode::Frozen)?;
    let corrected = sablas_correct(g, pred, x_next)?;
    let b = barrier.forward(g, x, ParamMode::Trainable)?;
    let b_next = barrier.forward(g, corrected, ParamMode::Trainable)?;
    let ascent = difference_ascent(g, b, b_next, step.dt, cfg.alpha)?;
    barrier_hinges(g, b, labels, ascent, labels, cfg)
}

/// Hinges on `a(x)^T u - b(x)` against control labels.
pub fn dh_hinges(g: &mut Graph, margin: Expr, labels: &[FrameLabel], cfg: &LossConfig) -> Result<Expr> {
    check_rows(g, margin, labels.len())?;
    let safe: Vec<bool> = labels.iter().map(|l| l.control.is_safe()).collect();
    let unsafe_: Vec<bool> = safe.iter().map(|s| !s).collect();
    let nm = g.neg(margin);
    let safe_arg = shift(g, nm, cfg.eps_safe)?;
    let unsafe_arg = shift(g, margin, cfg.eps_unsafe)?;
    let terms = vec![
        masked_hinge(g, safe_arg, &safe, cfg.w_safe, "safe-control")?,
        masked_hinge(g, unsafe_arg, &unsafe_, cfg.w_unsafe, "unsafe-control")?,
    ];
    total(g, terms)
}

pub fn dh_loss(
    g: &mut Graph,
    hyperplane: &HyperplaneNetwork,
    x: Expr,
    u: Expr,
    labels: &[FrameLabel],
    cfg: &LossConfig,
) -> Result<Expr> {
    let margin = hyperplane.margin(g, x, u, ParamMode::Trainable)?;
    dh_hinges(g, margin, labels, cfg)
}
