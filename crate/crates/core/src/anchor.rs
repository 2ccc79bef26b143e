//! Stereo-anchor selection.
//!
//! Lifting a single target image into metric Gaussians needs a partner view
//! with enough parallax. Candidates must be within a rotation gate of the
//! target; among those the widest baseline wins. When nothing passes the
//! gate, the least-rotated view is used so tracking does not break.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Camera;

pub const DEFAULT_GATE_DEG: f64 = 45.0;

#[derive(Debug, Error, PartialEq)]
pub enum AnchorError {
    #[error("no context cameras to choose an anchor from")]
    NoCandidates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorDecision {
    pub anchor_index: usize,
    pub relative_rotation_deg: f64,
    pub baseline: f64,
    pub fallback_used: bool,
}

/// Geodesic angle between two camera orientations, in degrees.
pub fn relative_rotation_deg(a: &Camera, b: &Camera) -> f64 {
    let rel = a.rotation() * b.rotation().transpose();
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    cos.acos().to_degrees()
}

pub fn baseline(a: &Camera, b: &Camera) -> f64 {
    (a.center() - b.center()).norm()
}

fn decision(
    target: &Camera,
    contexts: &[Camera],
    index: usize,
    fallback_used: bool,
) -> AnchorDecision {
    AnchorDecision {
        anchor_index: index,
        relative_rotation_deg: relative_rotation_deg(target, &contexts[index]),
        baseline: baseline(target, &contexts[index]),
        fallback_used,
    }
}

/// Widest-baseline context view within `gate_deg` of the target rotation.
pub fn select_stereo_anchor(
    target: &Camera,
    contexts: &[Camera],
    gate_deg: f64,
) -> Result<AnchorDecision, AnchorError> {
    if contexts.is_empty() {
        return Err(AnchorError::NoCandidates);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in contexts.iter().enumerate() {
        if relative_rotation_deg(target, c) < gate_deg {
            let b = baseline(target, c);
            // Strict comparison keeps the lowest index on ties.
            if best.is_none_or(|(_, bb)| b > bb) {
                best = Some((i, b));
            }
        }
    }
    if let Some((i, _)) = best {
        return Ok(decision(target, contexts, i, false));
    }
    let mut best = (0, f64::INFINITY);
    for (i, c) in contexts.iter().enumerate() {
        let theta = relative_rotation_deg(target, c);
        if theta < best.1 {
            best = (i, theta);
        }
    }
    Ok(decision(target, contexts, best.0, true))
}

/// Context view whose centre is closest to the target's. Used when anchor
/// selection is ablated.
pub fn select_nearest_view(
    target: &Camera,
    contexts: &[Camera],
) -> Result<AnchorDecision, AnchorError> {
    if contexts.is_empty() {
        return Err(AnchorError::NoCandidates);
    }
    let mut best = (0, f64::INFINITY);
    for (i, c) in contexts.iter().enumerate() {
        let b = baseline(target, c);
        if b < best.1 {
            best = (i, b);
        }
    }
    Ok(decision(target, contexts, best.0, false))
}

/// Indices of the `k` context cameras nearest the target by centre
/// distance, nearest first with ties broken by index.
pub fn nearest_views(target: &Camera, contexts: &[Camera], k: usize) -> Vec<usize> {
    let mut order: Vec<(f64, usize)> = contexts
        .iter()
        .enumerate()
        .map(|(i, c)| (baseline(target, c), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().take(k).map(|(_, i)| i).collect()
}
