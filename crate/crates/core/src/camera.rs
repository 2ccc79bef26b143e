//! Pinhole cameras with world-to-camera poses, and their JSON exchange format.
//!
//! Conventions follow OpenCV: camera x right, y down, z forward. A world point
//! `p` maps to camera space as `R p + t`; the camera centre is `-Rᵀ t`.
//! Pixel centres sit at integer coordinates.

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CameraError {
    #[error("camera {index}: focal lengths must be positive and finite (fx={fx}, fy={fy})")]
    InvalidFocal { index: usize, fx: f64, fy: f64 },
    #[error("camera {index}: resolution must be at least 1x1 (got {width}x{height})")]
    InvalidResolution {
        index: usize,
        width: u32,
        height: u32,
    },
    #[error("camera {index}: rotation is not orthonormal (max |RᵀR - I| = {deviation:e})")]
    NotOrthonormal { index: usize, deviation: f64 },
    #[error("camera {index}: reflection not a rotation (det = {det})")]
    Reflection { index: usize, det: f64 },
    #[error("camera {index}: non-finite {what}")]
    NonFinite { index: usize, what: &'static str },
    #[error("malformed camera JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Tolerance on `RᵀR = I` for a constructed camera.
pub const ROTATION_TOLERANCE: f64 = 1e-6;
/// Looser tolerance accepted on load before re-orthonormalising.
pub const LOAD_ROTATION_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    width: u32,
    height: u32,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self, CameraError> {
        validate(
            0,
            fx,
            fy,
            cx,
            cy,
            &rotation,
            &translation,
            width,
            height,
            ROTATION_TOLERANCE,
        )?;
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        })
    }

    /// Camera at `eye` looking at `target`; `up` is the approximate world up
    /// direction. Principal point at the image centre.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, CameraError> {
        let forward = (target - eye).normalize();
        // y points down in camera space.
        let right = (-up).cross(&forward).normalize();
        let down = forward.cross(&right);
        let rotation =
            Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            focal,
            focal,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            rotation,
            translation,
            width,
            height,
        )
    }

    pub fn fx(&self) -> f64 {
        self.fx
    }

    pub fn fy(&self) -> f64 {
        self.fy
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Unit viewing direction in world space.
    pub fn principal_axis(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Pixel coordinates of a camera-space point (no near-plane check).
    pub fn project_camera_point(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Unit world-space direction of the ray through pixel coordinates `(u, v)`.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        let local = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * local).normalize()
    }

    /// World point on the ray through `(u, v)` at planar depth `z`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        let local = Vector3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z);
        self.rotation.transpose() * (local - self.translation)
    }

    /// Same pose, different intrinsics and resolution.
    pub fn with_resolution(
        &self,
        width: u32,
        height: u32,
        focal_scale: f64,
    ) -> Result<Self, CameraError> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self::new(
            self.fx * focal_scale * sx,
            self.fy * focal_scale * sy,
            (self.cx + 0.5) * sx - 0.5,
            (self.cy + 0.5) * sy - 0.5,
            self.rotation,
            self.translation,
            width,
            height,
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn validate(
    index: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: &Matrix3<f64>,
    translation: &Vector3<f64>,
    width: u32,
    height: u32,
    tolerance: f64,
) -> Result<(), CameraError> {
    if !(fx.is_finite() && fy.is_finite() && fx > 0.0 && fy > 0.0) {
        return Err(CameraError::InvalidFocal { index, fx, fy });
    }
    if !(cx.is_finite() && cy.is_finite()) {
        return Err(CameraError::NonFinite {
            index,
            what: "principal point",
        });
    }
    if width == 0 || height == 0 {
        return Err(CameraError::InvalidResolution {
            index,
            width,
            height,
        });
    }
    if !rotation.iter().all(|v| v.is_finite()) {
        return Err(CameraError::NonFinite {
            index,
            what: "rotation",
        });
    }
    if !translation.iter().all(|v| v.is_finite()) {
        return Err(CameraError::NonFinite {
            index,
            what: "translation",
        });
    }
    let deviation = (rotation.transpose() * rotation - Matrix3::identity())
        .abs()
        .max();
    if deviation > tolerance {
        return Err(CameraError::NotOrthonormal { index, deviation });
    }
    let det = rotation.determinant();
    if det < 0.0 {
        return Err(CameraError::Reflection { index, det });
    }
    Ok(())
}

/// Nearest rotation matrix in the Frobenius sense.
fn orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    u * vt
}

/// On-disk camera record. `rotation` is the row-major world-to-camera matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub width: u32,
    pub height: u32,
}

impl From<&Camera> for CameraRecord {
    fn from(cam: &Camera) -> Self {
        let r = cam.rotation;
        Self {
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            rotation: [
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            translation: [cam.translation.x, cam.translation.y, cam.translation.z],
            width: cam.width,
            height: cam.height,
        }
    }
}

impl CameraRecord {
    fn into_camera(self, index: usize) -> Result<Camera, CameraError> {
        let rotation = Matrix3::from_row_slice(&self.rotation);
        let translation = Vector3::from(self.translation);
        validate(
            index,
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            &rotation,
            &translation,
            self.width,
            self.height,
            LOAD_ROTATION_TOLERANCE,
        )?;
        Ok(Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            rotation: orthonormalize(&rotation),
            translation,
            width: self.width,
            height: self.height,
        })
    }
}

/// Parses a JSON array of camera records, preserving order.
pub fn parse_cameras_json(text: &str) -> Result<Vec<Camera>, CameraError> {
    let records: Vec<CameraRecord> = serde_json::from_str(text)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.into_camera(i))
        .collect()
}

pub fn load_cameras_json(path: impl AsRef<Path>) -> Result<Vec<Camera>, CameraError> {
    parse_cameras_json(&std::fs::read_to_string(path)?)
}

pub fn cameras_to_json(cameras: &[Camera]) -> String {
    let records: Vec<CameraRecord> = cameras.iter().map(CameraRecord::from).collect();
    serde_json::to_string_pretty(&records).expect("camera records serialize")
}

pub fn save_cameras_json(cameras: &[Camera], path: impl AsRef<Path>) -> Result<(), CameraError> {
    std::fs::write(path, cameras_to_json(cameras))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record_json(rotation: [f64; 9], translation: [f64; 3], fx: f64) -> String {
        serde_json::to_string(&vec![CameraRecord {
            fx,
            fy: fx,
            cx: 32.0,
            cy: 32.0,
            rotation,
            translation,
            width: 64,
            height: 64,
        }])
        .unwrap()
    }

    const IDENTITY: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];

    #[test]
    fn identity_pose_center_at_origin() {
        let cams = parse_cameras_json(&record_json(IDENTITY, [0.0; 3], 100.0)).unwrap();
        assert_eq!(cams.len(), 1);
        assert_eq!(cams[0].center(), Vector3::zeros());
    }

    #[test]
    fn translation_only_center_is_negated() {
        let cams = parse_cameras_json(&record_json(IDENTITY, [0.5, -2.0, 3.0], 100.0)).unwrap();
        assert_eq!(cams[0].center(), Vector3::new(-0.5, 2.0, -3.0));
    }

    #[test]
    fn reflection_rejected() {
        let reflect = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0];
        let err = parse_cameras_json(&record_json(reflect, [0.0; 3], 100.0)).unwrap_err();
        assert!(
            err.to_string().contains("reflection not a rotation"),
            "{err}"
        );
    }

    #[test]
    fn non_orthonormal_and_bad_focal_rejected() {
        let skew = [1.0, 0.01, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert!(matches!(
            parse_cameras_json(&record_json(skew, [0.0; 3], 100.0)),
            Err(CameraError::NotOrthonormal { .. })
        ));
        assert!(matches!(
            parse_cameras_json(&record_json(IDENTITY, [0.0; 3], -1.0)),
            Err(CameraError::InvalidFocal { .. })
        ));
    }

    #[test]
    fn slightly_off_rotation_is_reorthonormalized() {
        let eps = 3e-5;
        let near = [1.0, eps, 0.0, -eps, 1.0, 0.0, 0.0, 0.0, 1.0];
        let cams = parse_cameras_json(&record_json(near, [0.0; 3], 100.0)).unwrap();
        let r = cams[0].rotation();
        assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn json_round_trip_preserves_order() {
        let a = Camera::look_at(
            Vector3::new(0.0, 0.0, -3.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            60.0,
            64,
            48,
        )
        .unwrap();
        let b = Camera::look_at(
            Vector3::new(1.0, 0.0, -3.0),
            Vector3::zeros(),
            Vector3::new(0.0, -1.0, 0.0),
            70.0,
            64,
            48,
        )
        .unwrap();
        let back = parse_cameras_json(&cameras_to_json(&[a.clone(), b.clone()])).unwrap();
        assert_eq!(back.len(), 2);
        assert!((back[0].center() - a.center()).norm() < 1e-12);
        assert_eq!(back[1].fx(), 70.0);
    }

    #[test]
    fn look_at_projects_target_to_principal_point() {
        let cam = Camera::look_at(
            Vector3::new(1.0, -0.5, -4.0),
            Vector3::new(0.2, 0.1, 0.3),
            Vector3::new(0.0, -1.0, 0.0),
            80.0,
            65,
            65,
        )
        .unwrap();
        let pc = cam.world_to_camera(&Vector3::new(0.2, 0.1, 0.3));
        let (u, v) = cam.project_camera_point(&pc);
        assert!((u - 32.0).abs() < 1e-9 && (v - 32.0).abs() < 1e-9);
        let back = cam.unproject(u, v, pc.z);
        assert!((back - Vector3::new(0.2, 0.1, 0.3)).norm() < 1e-9);
    }

    #[test]
    fn center_satisfies_pose_equation() {
        let cam = Camera::look_at(
            Vector3::new(-2.0, 0.3, 1.0),
            Vector3::new(0.0, 0.0, 4.0),
            Vector3::new(0.0, -1.0, 0.0),
            50.0,
            32,
            32,
        )
        .unwrap();
        let c = cam.center();
        assert!((cam.rotation() * c + cam.translation()).norm() < 1e-6);
    }
}
