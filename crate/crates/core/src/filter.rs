//! Minimum-deviation control filtering against one affine constraint and a
//! control box, plus state-level constraint and score helpers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffgraph::{Bindings, Graph, ParamStore, Value};
use crate::dynamics::{residual_step, StepConfig};
use crate::model::ModelError;
use crate::nets::{BarrierNetwork, ControlAffineDynamics, HyperplaneNetwork, ParamMode, ResidualDynamics};

pub const TOLERANCE: f64 = 1e-9;
pub const MAX_ITERATIONS: usize = 10_000;
/// Below this norm the constraint no longer depends on the control.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FilterError {
    #[error("non-finite filter input")]
    NonFinite,
    #[error("dimension mismatch: constraint {constraint}, reference {reference}, box {bounds}")]
    Dimension {
        constraint: usize,
        reference: usize,
        bounds: usize,
    },
    #[error("empty control box in dimension {0}")]
    EmptyBox(usize),
    #[error("projection did not converge in {iterations} iterations; last iterate {last:?}")]
    NoConvergence { iterations: usize, last: Vec<f64> },
}

/// `{u : a^T u >= b}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Halfspace {
    pub a: Vec<f64>,
    pub b: f64,
}

impl Halfspace {
    pub fn new(a: Vec<f64>, b: f64) -> Self {
        Self { a, b }
    }

    pub fn margin(&self, u: &[f64]) -> f64 {
        dot(&self.a, u) - self.b
    }

    pub fn is_finite(&self) -> bool {
        self.b.is_finite() && self.a.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ControlBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, FilterError> {
        if lower.len() != upper.len() {
            return Err(FilterError::Dimension {
                constraint: lower.len(),
                reference: upper.len(),
                bounds: lower.len(),
            });
        }
        if lower.iter().chain(&upper).any(|v| v.is_nan()) {
            return Err(FilterError::NonFinite);
        }
        if let Some(j) = (0..lower.len()).find(|&j| lower[j] > upper[j]) {
            return Err(FilterError::EmptyBox(j));
        }
        Ok(Self { lower, upper })
    }

    /// `[-bound, bound]^dim`.
    pub fn symmetric(dim: usize, bound: f64) -> Result<Self, FilterError> {
        Self::new(vec![-bound; dim], vec![bound; dim])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        u.iter()
            .enumerate()
            .all(|(j, &x)| self.lower[j] <= x && x <= self.upper[j])
    }

    pub fn clip(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(j, &x)| x.clamp(self.lower[j], self.upper[j]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterStatus {
    /// Reference already admissible and returned as is.
    Ok,
    /// Reference moved to the nearest admissible control.
    Clipped,
    /// No control in the box satisfies the constraint.
    Infeasible,
    /// The constraint does not depend on the control and is violated.
    StateDominated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub u_out: Vec<f64>,
    pub modified: bool,
    pub constraint_margin: f64,
    pub status: FilterStatus,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn decision(h: &Halfspace, u_ref: &[f64], u_out: Vec<f64>, status: FilterStatus) -> FilterDecision {
    FilterDecision {
        modified: u_out != u_ref,
        constraint_margin: h.margin(&u_out),
        u_out,
        status,
    }
}

/// Nearest point to `u_ref` in the box that satisfies `h`.
///
/// The constraint is rescaled to a unit normal first. Points within
/// [`TOLERANCE`] of the halfspace count as admissible, which makes the
/// filter idempotent on its own output.
pub fn qp_filter(h: &Halfspace, u_ref: &[f64], bounds: &ControlBox) -> Result<FilterDecision, FilterError> {
    let m = u_ref.len();
    if h.a.len() != m || bounds.dim() != m {
        return Err(FilterError::Dimension {
            constraint: h.a.len(),
            reference: m,
            bounds: bounds.dim(),
        });
    }
    if !h.is_finite() || u_ref.iter().any(|v| !v.is_finite()) {
        return Err(FilterError::NonFinite);
    }
    let norm = h.a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < DEGENERATE_NORM {
        let clipped = bounds.clip(u_ref);
        if h.b > 0.0 {
            return Ok(decision(h, u_ref, clipped, FilterStatus::StateDominated));
        }
        let status = if clipped == u_ref { FilterStatus::Ok } else { FilterStatus::Clipped };
        return Ok(decision(h, u_ref, clipped, status));
    }
    let a: Vec<f64> = h.a.iter().map(|v| v / norm).collect();
    let b = h.b / norm;
    let admissible = |u: &[f64]| dot(&a, u) - b >= -TOLERANCE;

    if bounds.contains(u_ref) && admissible(u_ref) {
        return Ok(decision(h, u_ref, u_ref.to_vec(), FilterStatus::Ok));
    }

    // Box point with the largest a^T u; free coordinates follow u_ref.
    let best: Vec<f64> = (0..m)
        .map(|j| {
            if a[j] > 0.0 {
                bounds.upper[j]
            } else if a[j] < 0.0 {
                bounds.lower[j]
            } else {
                u_ref[j].clamp(bounds.lower[j], bounds.upper[j])
            }
        })
        .collect();
    if dot(&a, &best) - b < -TOLERANCE {
        return Ok(decision(h, u_ref, best, FilterStatus::Infeasible));
    }

    let project_half = |v: &[f64]| -> Vec<f64> {
        let gap = b - dot(&a, v);
        if gap > 0.0 {
            v.iter().zip(&a).map(|(x, n)| x + gap * n).collect()
        } else {
            v.to_vec()
        }
    };

    // Dykstra's alternating projections.
    let mut x = u_ref.to_vec();
    let mut p = vec![0.0; m];
    let mut q = vec![0.0; m];
    for _ in 0..MAX_ITERATIONS {
        let xp: Vec<f64> = x.iter().zip(&p).map(|(u, v)| u + v).collect();
        let y = project_half(&xp);
        p = xp.iter().zip(&y).map(|(u, v)| u - v).collect();
        let yq: Vec<f64> = y.iter().zip(&q).map(|(u, v)| u + v).collect();
        let next = bounds.clip(&yq);
        q = yq.iter().zip(&next).map(|(u, v)| u - v).collect();
        let moved = x.iter().zip(&next).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        let gap = y.iter().zip(&next).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        x = next;
        if moved < TOLERANCE && gap < TOLERANCE && admissible(&x) {
            return Ok(decision(h, u_ref, x, FilterStatus::Clipped));
        }
    }
    Err(FilterError::NoConvergence {
        iterations: MAX_ITERATIONS,
        last: x,
    })
}

fn row(x: &[f64]) -> Value {
    Value::from_shape_vec((1, x.len()), x.to_vec()).expect("row shape")
}

fn finite(v: Value, what: &str) -> Result<Value, ModelError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(ModelError::NonFinite(what.to_string()))
    }
}

/// `B(x)`; a state counts as safe when this is nonnegative.
pub fn state_score(barrier: &BarrierNetwork, params: &ParamStore, x: &[f64]) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let xe = g.constant(row(x));
    let b = barrier.forward(&mut g, xe, ParamMode::Frozen)?;
    Ok(finite(g.evaluate(b, params, &Bindings::new())?, "barrier")?[[0, 0]])
}

/// `a = (grad B(x) G(x))^T`, `b = -grad B(x) f(x) - alpha B(x)`.
pub fn cbf_halfspace(
    barrier: &BarrierNetwork,
    dynamics: &ControlAffineDynamics,
    params: &ParamStore,
    x: &[f64],
    alpha: f64,
) -> Result<Halfspace, ModelError> {
    let mut g = Graph::new();
    let xe = g.constant(row(x));
    let (b, grad) = barrier.forward_with_gradient(&mut g, xe, ParamMode::Frozen)?;
    let f = dynamics.drift(&mut g, xe, ParamMode::Frozen)?;
    let gm = dynamics.input_matrix(&mut g, xe, ParamMode::Frozen)?;
    let vals = g.evaluate_many(&[b, grad, f, gm], params, &Bindings::new())?;
    let vals: Vec<Value> = vals
        .into_iter()
        .map(|v| finite(v, "constraint"))
        .collect::<Result<_, _>>()?;
    let (n, m) = (dynamics.state_dim, dynamics.control_dim);
    let a = (0..m)
        .map(|j| (0..n).map(|k| vals[1][[0, k]] * vals[3][[0, k * m + j]]).sum())
        .collect();
    let lie_f: f64 = (0..n).map(|k| vals[1][[0, k]] * vals[2][[0, k]]).sum();
    Ok(Halfspace::new(a, -lie_f - alpha * vals[0][[0, 0]]))
}

/// Linearization of the finite-difference ascent in `u` by probing each
/// control axis with step `delta`.
#[allow(clippy::too_many_arguments)]
pub fn sablas_halfspace(
    barrier: &BarrierNetwork,
    dynamics: &ResidualDynamics,
    params: &ParamStore,
    x: &[f64],
    alpha: f64,
    step: &StepConfig,
    delta: f64,
) -> Result<Halfspace, ModelError> {
    let m = dynamics.control_dim;
    let score = |u: &[f64]| sablas_action_score(barrier, dynamics, params, x, u, alpha, step);
    let base = score(&vec![0.0; m])?;
    let mut a = Vec::with_capacity(m);
    for j in 0..m {
        let mut e = vec![0.0; m];
        e[j] = delta;
        a.push((score(&e)? - base) / delta);
    }
    Ok(Halfspace::new(a, -base))
}

/// `(B(x + r(x, u) dt) - B(x)) / dt + alpha B(x)`.
pub fn sablas_action_score(
    barrier: &BarrierNetwork,
    dynamics: &ResidualDynamics,
    params: &ParamStore,
    x: &[f64],
    u: &[f64],
    alpha: f64,
    step: &StepConfig,
) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let xe = g.constant(row(x));
    let ue = g.constant(row(u));
    let next = residual_step(&mut g, dynamics, xe, ue, step, ParamMode::Frozen)?;
    let b = barrier.forward(&mut g, xe, ParamMode::Frozen)?;
    let bn = barrier.forward(&mut g, next, ParamMode::Frozen)?;
    let s = crate::training::difference_ascent(&mut g, b, bn, step.dt, alpha)?;
    Ok(finite(g.evaluate(s, params, &Bindings::new())?, "action score")?[[0, 0]])
}

/// `(a(x), b(x))` of the hyperplane model.
pub fn dh_halfspace(hyperplane: &HyperplaneNetwork, params: &ParamStore, x: &[f64]) -> Result<Halfspace, ModelError> {
    let mut g = Graph::new();
    let xe = g.constant(row(x));
    let (a, b) = hyperplane.forward(&mut g, xe, ParamMode::Frozen)?;
    let vals = g.evaluate_many(&[a, b], params, &Bindings::new())?;
    let a = finite(vals[0].clone(), "hyperplane normal")?;
    let b = finite(vals[1].clone(), "hyperplane offset")?;
    Ok(Halfspace::new(a.row(0).to_vec(), b[[0, 0]]))
}
