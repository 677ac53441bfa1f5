//! Frame labels from the first collision step.
//!
//! From the collision frame on, states and controls are unsafe. The five
//! frames before it keep safe states but carry unsafe controls. Everything
//! else, and every frame of an accident-free trajectory, is safe.

use super::{DataError, Result, Safety};

/// Frames before a collision whose controls are labeled unsafe.
pub const PRE_COLLISION_WINDOW: usize = 5;

/// `(state_label, control_label)` for frame `t`.
pub fn label_frame(t: usize, collision_step: Option<usize>) -> (Safety, Safety) {
    match collision_step {
        Some(c) if t >= c => (Safety::Unsafe, Safety::Unsafe),
        Some(c) if t + PRE_COLLISION_WINDOW >= c => (Safety::Safe, Safety::Unsafe),
        _ => (Safety::Safe, Safety::Safe),
    }
}

/// Labels for a trajectory of `frames` steps.
pub fn label(frames: usize, collision_step: Option<i64>) -> Result<Vec<(Safety, Safety)>> {
    let step = match collision_step {
        None => None,
        Some(c) if c < 0 || c as usize >= frames => {
            return Err(DataError::CollisionStep { step: c, frames });
        }
        Some(c) => Some(c as usize),
    };
    Ok((0..frames).map(|t| label_frame(t, step)).collect())
}
