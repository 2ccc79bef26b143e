//! Gaussian primitives, scenes and loss weights.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SceneError {
    #[error("non-finite {what}")]
    NonFinite { what: &'static str },
    #[error("scale component {axis} is not strictly positive ({value})")]
    NonPositiveScale { axis: usize, value: f64 },
    #[error("degenerate quaternion")]
    DegenerateQuaternion,
    #[error("provenance length {provenance} does not match primitive count {primitives}")]
    ProvenanceMismatch {
        primitives: usize,
        provenance: usize,
    },
}

/// Where a primitive came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    /// Reconstructed from observed views.
    Context,
    /// Lifted from a synthesized target image during the current step.
    Target,
    /// Integrated by an earlier completion step.
    Merged,
}

impl Provenance {
    pub fn to_u8(self) -> u8 {
        match self {
            Provenance::Context => 0,
            Provenance::Target => 1,
            Provenance::Merged => 2,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Provenance::Context),
            1 => Some(Provenance::Target),
            2 => Some(Provenance::Merged),
            _ => None,
        }
    }
}

/// One anisotropic Gaussian with a view-independent colour.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub scale: Vector3<f64>,
    pub opacity: f64,
    pub color: Vector3<f64>,
}

impl GaussianPrimitive {
    /// Validates finiteness and positive scale, normalises the rotation and
    /// clamps opacity and colour to [0, 1].
    pub fn new(
        mean: Vector3<f64>,
        rotation: Quaternion<f64>,
        scale: Vector3<f64>,
        opacity: f64,
        color: Vector3<f64>,
    ) -> Result<Self, SceneError> {
        if !mean.iter().all(|v| v.is_finite()) {
            return Err(SceneError::NonFinite { what: "mean" });
        }
        if !rotation.coords.iter().all(|v| v.is_finite()) {
            return Err(SceneError::NonFinite { what: "rotation" });
        }
        if !scale.iter().all(|v| v.is_finite()) {
            return Err(SceneError::NonFinite { what: "scale" });
        }
        if !opacity.is_finite() {
            return Err(SceneError::NonFinite { what: "opacity" });
        }
        if !color.iter().all(|v| v.is_finite()) {
            return Err(SceneError::NonFinite { what: "color" });
        }
        for (axis, &value) in scale.iter().enumerate() {
            if value <= 0.0 {
                return Err(SceneError::NonPositiveScale { axis, value });
            }
        }
        let norm = rotation.norm();
        if norm < 1e-12 {
            return Err(SceneError::DegenerateQuaternion);
        }
        Ok(Self {
            mean,
            rotation: UnitQuaternion::new_unchecked(rotation / norm),
            scale,
            opacity: opacity.clamp(0.0, 1.0),
            color: color.map(|c| c.clamp(0.0, 1.0)),
        })
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        covariance_matrix(&self.rotation, &self.scale)
    }
}

/// `R S Sᵀ Rᵀ` for a unit quaternion and per-axis scale.
pub fn covariance_from_scale_rotation(
    rotation: &UnitQuaternion<f64>,
    scale: &Vector3<f64>,
) -> Result<Matrix3<f64>, SceneError> {
    if !rotation.coords.iter().all(|v| v.is_finite()) {
        return Err(SceneError::NonFinite { what: "rotation" });
    }
    if !scale.iter().all(|v| v.is_finite()) {
        return Err(SceneError::NonFinite { what: "scale" });
    }
    Ok(covariance_matrix(rotation, scale))
}

fn covariance_matrix(rotation: &UnitQuaternion<f64>, scale: &Vector3<f64>) -> Matrix3<f64> {
    let r = rotation.to_rotation_matrix().into_inner();
    let mut m = r;
    for c in 0..3 {
        for row in 0..3 {
            m[(row, c)] *= scale[c];
        }
    }
    // Sum in identical order for (i, j) and (j, i) so the result is
    // bitwise symmetric.
    let mut cov = Matrix3::zeros();
    for i in 0..3 {
        for j in i..3 {
            let v = m[(i, 0)] * m[(j, 0)] + m[(i, 1)] * m[(j, 1)] + m[(i, 2)] * m[(j, 2)];
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    cov
}

/// Ordered primitives with one provenance tag each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianScene {
    primitives: Vec<GaussianPrimitive>,
    provenance: Vec<Provenance>,
}

impl GaussianScene {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(
        primitives: Vec<GaussianPrimitive>,
        provenance: Vec<Provenance>,
    ) -> Result<Self, SceneError> {
        if primitives.len() != provenance.len() {
            return Err(SceneError::ProvenanceMismatch {
                primitives: primitives.len(),
                provenance: provenance.len(),
            });
        }
        Ok(Self {
            primitives,
            provenance,
        })
    }

    pub fn with_tag(primitives: Vec<GaussianPrimitive>, tag: Provenance) -> Self {
        let provenance = vec![tag; primitives.len()];
        Self {
            primitives,
            provenance,
        }
    }

    pub fn push(&mut self, primitive: GaussianPrimitive, tag: Provenance) {
        self.primitives.push(primitive);
        self.provenance.push(tag);
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn primitives(&self) -> &[GaussianPrimitive] {
        &self.primitives
    }

    pub fn primitives_mut(&mut self) -> &mut [GaussianPrimitive] {
        &mut self.primitives
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn set_provenance(&mut self, index: usize, tag: Provenance) {
        self.provenance[index] = tag;
    }

    pub fn retag_all(&mut self, from: Provenance, to: Provenance) {
        for tag in &mut self.provenance {
            if *tag == from {
                *tag = to;
            }
        }
    }

    pub fn indices_with(&self, tag: Provenance) -> Vec<usize> {
        self.provenance
            .iter()
            .enumerate()
            .filter_map(|(i, &t)| (t == tag).then_some(i))
            .collect()
    }

    pub fn means(&self) -> Vec<Vector3<f64>> {
        self.primitives.iter().map(|p| p.mean).collect()
    }

    /// New scene holding the listed primitives in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            primitives: indices
                .iter()
                .map(|&i| self.primitives[i].clone())
                .collect(),
            provenance: indices.iter().map(|&i| self.provenance[i]).collect(),
        }
    }

    pub fn extend(&mut self, other: &GaussianScene) {
        self.primitives.extend_from_slice(&other.primitives);
        self.provenance.extend_from_slice(&other.provenance);
    }

    pub fn into_parts(self) -> (Vec<GaussianPrimitive>, Vec<Provenance>) {
        (self.primitives, self.provenance)
    }
}

/// Weights of the registration and refinement objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Target-view depth against sparse context depth.
    pub lambda_d: f64,
    /// Anchor-view depth of the target Gaussians against context depth.
    pub lambda_s: f64,
    /// Photometric term against the reference image.
    pub lambda_c: f64,
    /// Weight of the reference-image term during opacity refinement.
    pub lambda_mv: f64,
    /// Accumulated-alpha threshold for holes and depth validity.
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_d: 1.0,
            lambda_s: 1.0,
            lambda_c: 0.1,
            lambda_mv: 0.1,
            tau: 0.5,
        }
    }
}
