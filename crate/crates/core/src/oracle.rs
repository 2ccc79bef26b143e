//! Synthetic ground truth standing in for the learned generator and the
//! feed-forward Gaussian regressor.
//!
//! A ground-truth scene is a set of flat Gaussians tiling textured surfaces
//! (a room or a height field). Everything the pipeline consumes is derived
//! from renders of it:
//!
//! * the context scene is a pixel-aligned lifting of the context views,
//! * the reference image at the target pose is the ground-truth render,
//!   optionally degraded,
//! * the target prediction is a pixel-aligned lifting of the target view
//!   from a corrupted depth map, together with a corrupted depth map of the
//!   anchor view.
//!
//! Depth corruption is affine in planar depth, `z ← (z − t*)/s*`, followed
//! by a smooth multiplicative distortion, multiplicative noise and uniform
//! outliers. Fitting the corrupted depth back to truth therefore recovers
//! `(s*, t*)` exactly when the other terms vanish. The strength of the
//! non-affine terms grows as the stereo baseline between target and anchor
//! shrinks, mirroring how triangulation error scales with `1/baseline`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::anchor::{baseline, relative_rotation_deg, DEFAULT_GATE_DEG};
use crate::camera::Camera;
use crate::plane::{DepthMap, Plane, RgbImage};
use crate::render::{render, RenderBuffers, RenderConfig};
use crate::scene::{GaussianPrimitive, GaussianScene, Provenance};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Five textured walls of a 6 × 3 × 8 box, open towards the camera.
    Room,
    /// Rolling height field seen from above.
    Terrain,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "room" => Ok(Self::Room),
            "terrain" => Ok(Self::Terrain),
            other => Err(format!(
                "unknown preset '{other}' (expected room or terrain)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub preset: Preset,
    pub n_primitives: usize,
    pub n_frames: usize,
    pub width: u32,
    pub height: u32,
    pub fov_deg: f64,
    /// Camera translation between consecutive frames, world units.
    pub frame_step: f64,
    /// Yaw change between consecutive frames, degrees.
    pub frame_yaw_deg: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn new(preset: Preset, n_primitives: usize, seed: u64) -> Self {
        Self {
            preset,
            n_primitives,
            n_frames: 12,
            width: 96,
            height: 96,
            fov_deg: 70.0,
            frame_step: 0.15,
            frame_yaw_deg: 4.0,
            seed,
        }
    }

    pub fn focal(&self) -> f64 {
        0.5 * self.width as f64 / (0.5 * self.fov_deg.to_radians()).tan()
    }
}

#[derive(Clone, Debug)]
pub struct OracleScene {
    pub spec: SceneSpec,
    pub gt_scene: GaussianScene,
    pub cameras: Vec<Camera>,
    pub gt_renders: Vec<RenderBuffers>,
    pub rng_seed: u64,
}

impl OracleScene {
    /// Axis-aligned bounds of the preset's geometry.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        preset_bounds(self.spec.preset)
    }

    pub fn diagonal(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (hi - lo).norm()
    }
}

pub fn preset_bounds(preset: Preset) -> (Vector3<f64>, Vector3<f64>) {
    match preset {
        Preset::Room => (Vector3::new(-3.0, -1.5, 0.0), Vector3::new(3.0, 1.5, 8.0)),
        Preset::Terrain => (Vector3::new(-6.0, 0.4, 0.0), Vector3::new(6.0, 2.6, 14.0)),
    }
}

/// Smooth deterministic value noise in roughly [-1, 1].
fn value_noise(seed: u64, x: f64, y: f64) -> f64 {
    fn hash(seed: u64, i: i64, j: i64) -> f64 {
        let mut h = seed
            ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ (j as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
        h ^= h >> 33;
        h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
        h ^= h >> 33;
        (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    }
    let (i, j) = (x.floor() as i64, y.floor() as i64);
    let (fx, fy) = (x - x.floor(), y - y.floor());
    let sx = fx * fx * (3.0 - 2.0 * fx);
    let sy = fy * fy * (3.0 - 2.0 * fy);
    let a = hash(seed, i, j) + (hash(seed, i + 1, j) - hash(seed, i, j)) * sx;
    let b = hash(seed, i, j + 1) + (hash(seed, i + 1, j + 1) - hash(seed, i, j + 1)) * sx;
    a + (b - a) * sy
}

/// Procedural albedo: a base colour modulated by a checkerboard and two
/// octaves of value noise.
fn surface_color(seed: u64, base: Vector3<f64>, s: f64, t: f64, period: f64) -> Vector3<f64> {
    let checker = if ((s / period).floor() + (t / period).floor()) as i64 % 2 == 0 {
        1.0
    } else {
        0.72
    };
    let n = 0.6 * value_noise(seed, s * 1.7, t * 1.7)
        + 0.4 * value_noise(seed ^ 0xABCD, s * 5.3, t * 5.3);
    let tint = Vector3::new(
        value_noise(seed ^ 1, s * 0.5, t * 0.5),
        value_noise(seed ^ 2, s * 0.5, t * 0.5),
        value_noise(seed ^ 3, s * 0.5, t * 0.5),
    );
    (base * checker * (1.0 + 0.25 * n) + 0.08 * tint).map(|c| c.clamp(0.02, 0.98))
}

struct Surface {
    origin: Vector3<f64>,
    /// In-plane axes; `e1 × e2` is the normal facing the interior.
    e1: Vector3<f64>,
    e2: Vector3<f64>,
    len1: f64,
    len2: f64,
    base: Vector3<f64>,
}

fn room_surfaces(rng: &mut ChaCha8Rng) -> Vec<Surface> {
    let mut base = || {
        Vector3::new(
            rng.random_range(0.25..0.85),
            rng.random_range(0.25..0.85),
            rng.random_range(0.25..0.85),
        )
    };
    let (x, y, z) = (Vector3::x(), Vector3::y(), Vector3::z());
    vec![
        // Floor at y = +1.5 (y points down), normal −y.
        Surface {
            origin: Vector3::new(-3.0, 1.5, 0.0),
            e1: z,
            e2: x,
            len1: 8.0,
            len2: 6.0,
            base: base(),
        },
        // Ceiling, normal +y.
        Surface {
            origin: Vector3::new(-3.0, -1.5, 0.0),
            e1: x,
            e2: z,
            len1: 6.0,
            len2: 8.0,
            base: base(),
        },
        // Left wall x = −3, normal +x.
        Surface {
            origin: Vector3::new(-3.0, -1.5, 0.0),
            e1: y,
            e2: z,
            len1: 3.0,
            len2: 8.0,
            base: base(),
        },
        // Right wall x = +3, normal −x.
        Surface {
            origin: Vector3::new(3.0, -1.5, 0.0),
            e1: z,
            e2: y,
            len1: 8.0,
            len2: 3.0,
            base: base(),
        },
        // Back wall z = 8, normal −z.
        Surface {
            origin: Vector3::new(-3.0, -1.5, 8.0),
            e1: y,
            e2: x,
            len1: 3.0,
            len2: 6.0,
            base: base(),
        },
    ]
}

/// Splits `n` over weights by largest remainder.
fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let raw: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        (raw[b] - raw[b].floor())
            .total_cmp(&(raw[a] - raw[a].floor()))
            .then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Jittered-grid sample positions `(s, t)` in `[0, len1] × [0, len2]`.
fn stratified(rng: &mut ChaCha8Rng, n: usize, len1: f64, len2: f64) -> Vec<(f64, f64)> {
    if n == 0 {
        return Vec::new();
    }
    let cols = ((n as f64 * len1 / len2).sqrt().round() as usize).max(1);
    let rows = n.div_ceil(cols);
    let mut cells: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .collect();
    // Drop surplus cells at random so the remainder stays spread out.
    while cells.len() > n {
        let k = rng.random_range(0..cells.len());
        cells.swap_remove(k);
    }
    cells.sort_unstable();
    let (ds, dt) = (len1 / cols as f64, len2 / rows as f64);
    cells
        .into_iter()
        .map(|(r, c)| {
            (
                (c as f64 + rng.random_range(0.25..0.75)) * ds,
                (r as f64 + rng.random_range(0.25..0.75)) * dt,
            )
        })
        .collect()
}

fn oriented(e1: &Vector3<f64>, e2: &Vector3<f64>) -> UnitQuaternion<f64> {
    let n = e1.cross(e2).normalize();
    let e2 = n.cross(e1).normalize();
    let m = Matrix3::from_columns(&[e1.normalize(), e2, n]);
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(m))
}

fn surface_splat(
    rotation: UnitQuaternion<f64>,
    mean: Vector3<f64>,
    spacing: f64,
    color: Vector3<f64>,
) -> GaussianPrimitive {
    let mut p = GaussianPrimitive::new(
        mean,
        *rotation.quaternion(),
        Vector3::new(0.6 * spacing, 0.6 * spacing, 0.08 * spacing),
        0.95,
        color,
    )
    .expect("surface splat parameters are finite");
    p.rotation = rotation;
    p
}

fn room_scene(n: usize, rng: &mut ChaCha8Rng, seed: u64) -> Vec<GaussianPrimitive> {
    let surfaces = room_surfaces(rng);
    let counts = apportion(
        n,
        &surfaces.iter().map(|s| s.len1 * s.len2).collect::<Vec<_>>(),
    );
    let mut prims = Vec::with_capacity(n);
    for (k, (surf, &count)) in surfaces.iter().zip(&counts).enumerate() {
        if count == 0 {
            continue;
        }
        let spacing = (surf.len1 * surf.len2 / count as f64).sqrt();
        let rot = oriented(&surf.e1, &surf.e2);
        for (s, t) in stratified(rng, count, surf.len1, surf.len2) {
            let mean = surf.origin + surf.e1 * s + surf.e2 * t;
            let color = surface_color(seed.wrapping_add(k as u64), surf.base, s, t, 0.75);
            prims.push(surface_splat(rot, mean, spacing, color));
        }
    }
    prims
}

fn terrain_height(seed: u64, x: f64, z: f64) -> f64 {
    1.6 + 0.45 * (0.6 * x + 0.3).sin() * (0.45 * z).cos()
        + 0.25 * value_noise(seed, 0.35 * x, 0.35 * z)
}

fn terrain_scene(n: usize, rng: &mut ChaCha8Rng, seed: u64) -> Vec<GaussianPrimitive> {
    let (lo, hi) = preset_bounds(Preset::Terrain);
    let (len_x, len_z) = (hi.x - lo.x, hi.z - lo.z);
    let spacing = (len_x * len_z / n.max(1) as f64).sqrt();
    let grass = Vector3::new(0.35, 0.55, 0.25);
    let rock = Vector3::new(0.6, 0.5, 0.4);
    stratified(rng, n, len_x, len_z)
        .into_iter()
        .map(|(s, t)| {
            let (x, z) = (lo.x + s, lo.z + t);
            let y = terrain_height(seed, x, z);
            let h = 1e-3;
            let dx = (terrain_height(seed, x + h, z) - terrain_height(seed, x - h, z)) / (2.0 * h);
            let dz = (terrain_height(seed, x, z + h) - terrain_height(seed, x, z - h)) / (2.0 * h);
            let e1 = Vector3::new(0.0, dz, 1.0).normalize();
            let e2 = Vector3::new(1.0, dx, 0.0).normalize();
            let mix = ((y - 1.2) / 0.9).clamp(0.0, 1.0);
            let color = surface_color(seed, grass * (1.0 - mix) + rock * mix, x, z, 1.1);
            surface_splat(oriented(&e1, &e2), Vector3::new(x, y, z), spacing, color)
        })
        .collect()
}

fn trajectory(spec: &SceneSpec) -> Vec<Camera> {
    let focal = spec.focal();
    let up = Vector3::new(0.0, -1.0, 0.0);
    (0..spec.n_frames.max(1))
        .map(|i| {
            let i = i as f64;
            let (eye, yaw, pitch) = match spec.preset {
                Preset::Room => (
                    Vector3::new(
                        -1.2 + 0.8 * spec.frame_step * i,
                        0.1,
                        0.8 + 0.6 * spec.frame_step * i,
                    ),
                    (-12.0 + spec.frame_yaw_deg * i).to_radians(),
                    0.0f64,
                ),
                Preset::Terrain => (
                    Vector3::new(
                        -1.0 + 0.5 * spec.frame_step * i,
                        0.0,
                        0.5 + 0.85 * spec.frame_step * i,
                    ),
                    (-8.0 + spec.frame_yaw_deg * i).to_radians(),
                    (-18.0f64).to_radians(),
                ),
            };
            let forward = Vector3::new(
                yaw.sin() * pitch.cos(),
                -pitch.sin(),
                yaw.cos() * pitch.cos(),
            );
            Camera::look_at(eye, eye + forward, up, focal, spec.width, spec.height)
                .expect("trajectory cameras are valid")
        })
        .collect()
}

/// Ground-truth scene, camera trajectory and renders. Deterministic in
/// `spec` (including its seed).
pub fn generate_synthetic_scene(spec: &SceneSpec, render_cfg: &RenderConfig) -> OracleScene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prims = match spec.preset {
        Preset::Room => room_scene(spec.n_primitives, &mut rng, spec.seed),
        Preset::Terrain => terrain_scene(spec.n_primitives, &mut rng, spec.seed),
    };
    let gt_scene = GaussianScene::with_tag(prims, Provenance::Context);
    let cameras = trajectory(spec);
    let gt_renders = cameras
        .iter()
        .map(|c| render(&gt_scene, c, render_cfg))
        .collect();
    OracleScene {
        spec: spec.clone(),
        gt_scene,
        cameras,
        gt_renders,
        rng_seed: spec.seed,
    }
}

/// Isotropic splat covering pixel `(x, y)` at planar depth `z`.
pub fn pixel_splat(
    cam: &Camera,
    x: f64,
    y: f64,
    z: f64,
    sigma_px: f64,
    opacity: f64,
    color: [f64; 3],
) -> GaussianPrimitive {
    GaussianPrimitive::new(
        cam.unproject(x, y, z),
        nalgebra::Quaternion::identity(),
        Vector3::repeat(z * sigma_px / cam.fx()),
        opacity,
        Vector3::from(color),
    )
    .expect("lifted splat parameters are finite")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextSpec {
    /// Total primitive budget across all context views.
    pub n_primitives: usize,
    /// Multiplicative depth noise σ of the lifted context.
    pub depth_noise: f64,
    pub opacity: f64,
    pub seed: u64,
}

impl Default for ContextSpec {
    fn default() -> Self {
        Self {
            n_primitives: 12_000,
            depth_noise: 0.003,
            opacity: 0.9,
            seed: 0,
        }
    }
}

/// Pixel-aligned lifting of the given views' ground-truth renders, subsampled
/// to the primitive budget.
pub fn build_context(oracle: &OracleScene, views: &[usize], spec: &ContextSpec) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_C0DE);
    let mut candidates: Vec<(usize, usize, usize)> = Vec::new();
    for &v in views {
        let depth = &oracle.gt_renders[v].depth;
        for y in 0..depth.height() {
            for x in 0..depth.width() {
                if depth.depth_at(x, y).is_some() && *oracle.gt_renders[v].alpha.get(x, y) > 0.5 {
                    candidates.push((v, x, y));
                }
            }
        }
    }
    let n = spec.n_primitives.min(candidates.len());
    // Partial Fisher-Yates keeps the draw a pure function of the seed.
    for i in 0..n {
        let j = rng.random_range(i..candidates.len());
        candidates.swap(i, j);
    }
    let mut chosen = candidates[..n].to_vec();
    chosen.sort_unstable();
    let sigma_px = 0.75
        * ((candidates.len() as f64) / n.max(1) as f64)
            .sqrt()
            .max(1.0);
    let noise = Normal::new(0.0, spec.depth_noise.max(0.0)).expect("finite sigma");
    let prims = chosen
        .into_iter()
        .map(|(v, x, y)| {
            let r = &oracle.gt_renders[v];
            let z = r.depth.get(x, y) * (1.0 + noise.sample(&mut rng));
            pixel_splat(
                &oracle.cameras[v],
                x as f64,
                y as f64,
                z,
                sigma_px,
                spec.opacity,
                *r.rgb.get(x, y),
            )
        })
        .collect();
    GaussianScene::with_tag(prims, Provenance::Context)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub affine_scale: f64,
    pub affine_shift: f64,
    /// Multiplicative noise σ as a fraction of depth.
    pub ray_noise_sigma: f64,
    pub outlier_fraction: f64,
    /// Peak relative amplitude of a smooth, image-space depth distortion
    /// with zero mean over the full frame.
    pub distortion: f64,
    /// Baseline at which the noise terms take their nominal strength.
    pub reference_baseline: f64,
    pub rng_seed: u64,
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self {
            affine_scale: 1.25,
            affine_shift: 0.2,
            ray_noise_sigma: 0.05,
            outlier_fraction: 0.3,
            distortion: 0.08,
            reference_baseline: 0.6,
            rng_seed: 0,
        }
    }
}

impl CorruptionSpec {
    pub fn identity() -> Self {
        Self {
            affine_scale: 1.0,
            affine_shift: 0.0,
            ray_noise_sigma: 0.0,
            outlier_fraction: 0.0,
            distortion: 0.0,
            ..Self::default()
        }
    }

    /// Non-affine terms amplified by `factor` (outliers capped at 0.9).
    pub fn amplified(&self, factor: f64) -> Self {
        Self {
            ray_noise_sigma: self.ray_noise_sigma * factor,
            outlier_fraction: (self.outlier_fraction * factor).min(0.9),
            distortion: self.distortion * factor,
            ..self.clone()
        }
    }

    /// Error amplification for a target/anchor pair: `reference/baseline`,
    /// clamped to `[1, 8]`, doubled when the pair fails the rotation gate.
    pub fn pair_factor(&self, target: &Camera, anchor: &Camera) -> f64 {
        // A zero reference baseline turns pair-dependent amplification off.
        if self.reference_baseline == 0.0 {
            return 1.0;
        }
        let b = baseline(target, anchor);
        let mut f = if b > 0.0 {
            (self.reference_baseline / b).clamp(1.0, 8.0)
        } else {
            8.0
        };
        if relative_rotation_deg(target, anchor) >= DEFAULT_GATE_DEG {
            f *= 2.0;
        }
        f
    }
}

/// Smooth field on the image with zero mean over the full frame.
#[derive(Clone, Debug)]
pub struct DistortionField {
    terms: Vec<(f64, f64, f64, f64)>,
    width: f64,
    height: f64,
}

impl DistortionField {
    pub fn new(seed: u64, width: usize, height: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD157_0A7E);
        let raw: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|k| {
                let fx = [1.0, 1.0, 2.0][k];
                let fy = [0.0, 1.0, 1.0][k];
                (
                    fx,
                    fy,
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.5..1.0),
                )
            })
            .collect();
        let total: f64 = raw.iter().map(|t| t.3).sum();
        Self {
            terms: raw
                .into_iter()
                .map(|(fx, fy, p, a)| (fx, fy, p, a / total))
                .collect(),
            width: width as f64,
            height: height as f64,
        }
    }

    pub fn at(&self, u: f64, v: f64) -> f64 {
        let (s, t) = ((u + 0.5) / self.width, (v + 0.5) / self.height);
        self.terms
            .iter()
            .map(|&(fx, fy, p, a)| a * (std::f64::consts::TAU * (fx * s + fy * t) + p).sin())
            .sum()
    }
}

/// Per-pixel depth corruption shared by depth maps and lifted primitives.
struct Corruptor<'a> {
    spec: &'a CorruptionSpec,
    field: DistortionField,
    noise: Normal<f64>,
    outlier_range: (f64, f64),
    rng: ChaCha8Rng,
}

impl<'a> Corruptor<'a> {
    fn new(
        spec: &'a CorruptionSpec,
        stream: u64,
        width: usize,
        height: usize,
        outlier_range: (f64, f64),
    ) -> Self {
        let seed = spec.rng_seed.wrapping_mul(0x9E37_79B9).wrapping_add(stream);
        Self {
            spec,
            field: DistortionField::new(seed, width, height),
            noise: Normal::new(0.0, spec.ray_noise_sigma.max(0.0)).expect("finite sigma"),
            outlier_range,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Predicted planar depth for true depth `z` at pixel `(u, v)`.
    fn corrupt(&mut self, z: f64, u: f64, v: f64) -> f64 {
        let s = self.spec.affine_scale;
        let t = self.spec.affine_shift;
        // Draw both variates unconditionally so streams stay aligned.
        let n = self.noise.sample(&mut self.rng);
        let roll: f64 = self.rng.random();
        let pick: f64 = self.rng.random();
        let truth = if roll < self.spec.outlier_fraction {
            self.outlier_range.0 + pick * (self.outlier_range.1 - self.outlier_range.0)
        } else {
            z * (1.0 + self.spec.distortion * self.field.at(u, v)) * (1.0 + n)
        };
        ((truth - t) / s).max(1e-3)
    }
}

fn depth_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), z| {
        (lo.min(z), hi.max(z))
    })
}

/// Moves each primitive along its target-camera ray to the corrupted planar
/// depth. Outliers are uniform over the input's depth range. Primitives
/// behind the camera have no ray and are left in place.
pub fn corrupt_target_prediction(
    scene: &GaussianScene,
    cam: &Camera,
    spec: &CorruptionSpec,
) -> GaussianScene {
    let depths: Vec<f64> = scene
        .primitives()
        .iter()
        .map(|p| cam.world_to_camera(&p.mean).z)
        .collect();
    let range = depth_range(depths.iter().copied().filter(|&z| z > 0.0));
    let mut c = Corruptor::new(spec, 0, cam.width() as usize, cam.height() as usize, range);
    let mut out = scene.clone();
    for (p, &z) in out.primitives_mut().iter_mut().zip(&depths) {
        if z <= 0.0 {
            continue;
        }
        let (u, v) = cam.project_camera_point(&cam.world_to_camera(&p.mean));
        p.mean = cam.unproject(u, v, c.corrupt(z, u, v));
    }
    out
}

/// Corrupts every valid pixel of a planar depth map.
pub fn corrupt_depth_map(depth: &DepthMap, spec: &CorruptionSpec, stream: u64) -> DepthMap {
    let range = depth_range(depth.as_slice().iter().copied().filter(|z| z.is_finite()));
    let mut c = Corruptor::new(spec, stream, depth.width(), depth.height(), range);
    Plane::from_fn(depth.width(), depth.height(), |x, y| {
        match depth.depth_at(x, y) {
            Some(z) => c.corrupt(z, x as f64, y as f64),
            None => f64::NAN,
        }
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Degradation {
    pub blur_sigma_px: f64,
    pub noise_amplitude: f64,
    pub seed: u64,
}

fn blur(img: &RgbImage, sigma: f64) -> RgbImage {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let (w, h) = (img.width() as isize, img.height() as isize);
    let pass = |src: &RgbImage, horizontal: bool| -> RgbImage {
        Plane::from_fn(src.width(), src.height(), |x, y| {
            let mut acc = [0.0; 3];
            let mut norm = 0.0;
            for (k, &wgt) in kernel.iter().enumerate() {
                let d = k as isize - radius;
                let (xx, yy) = if horizontal {
                    (x as isize + d, y as isize)
                } else {
                    (x as isize, y as isize + d)
                };
                if xx < 0 || yy < 0 || xx >= w || yy >= h {
                    continue;
                }
                let p = src.get(xx as usize, yy as usize);
                for c in 0..3 {
                    acc[c] += wgt * p[c];
                }
                norm += wgt;
            }
            acc.map(|a| a / norm)
        })
    };
    pass(&pass(img, true), false)
}

/// Ground-truth render at `cam`, optionally blurred and noised, standing in
/// for a generated novel view.
pub fn make_reference_image(
    gt_scene: &GaussianScene,
    cam: &Camera,
    degradation: &Degradation,
    render_cfg: &RenderConfig,
) -> RgbImage {
    degrade(&render(gt_scene, cam, render_cfg).rgb, degradation)
}

pub fn degrade(img: &RgbImage, degradation: &Degradation) -> RgbImage {
    let mut out = if degradation.blur_sigma_px > 0.0 {
        blur(img, degradation.blur_sigma_px)
    } else {
        img.clone()
    };
    if degradation.noise_amplitude > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(degradation.seed);
        for p in out.as_mut_slice() {
            for c in p.iter_mut() {
                *c = (*c + degradation.noise_amplitude * rng.random_range(-1.0..1.0))
                    .clamp(0.0, 1.0);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiftSpec {
    /// Lift one primitive every `stride` pixels in each direction.
    pub stride: usize,
    pub opacity: f64,
    /// Footprint σ in units of `stride` pixels.
    pub footprint: f64,
}

impl Default for LiftSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            opacity: 0.85,
            footprint: 0.7,
        }
    }
}

/// Simulated feed-forward prediction for one target/anchor pair.
#[derive(Clone, Debug)]
pub struct TargetPrediction {
    pub gaussians: GaussianScene,
    /// Predicted planar depth at the target pose; valid only at lifted pixels.
    pub depth_target: DepthMap,
    /// Predicted planar depth of the anchor view.
    pub depth_anchor: DepthMap,
    /// True position of each lifted primitive, on its pixel ray.
    pub gt_points: Vec<Vector3<f64>>,
    pub pixels: Vec<(usize, usize)>,
    /// Error amplification applied for this pair.
    pub pair_factor: f64,
}

/// Lifts the target view from its corrupted depth and corrupts the anchor
/// view's depth with the same affine drift.
#[allow(clippy::too_many_arguments)]
pub fn predict_target(
    target_cam: &Camera,
    target_truth: &RenderBuffers,
    reference: &RgbImage,
    anchor_cam: &Camera,
    anchor_truth_depth: &DepthMap,
    corruption: &CorruptionSpec,
    lift: &LiftSpec,
    stream: u64,
) -> TargetPrediction {
    let pair_factor = corruption.pair_factor(target_cam, anchor_cam);
    let spec = corruption.amplified(pair_factor);
    let stride = lift.stride.max(1);
    let (w, h) = (target_truth.width(), target_truth.height());
    let mut pixels = Vec::new();
    for y in (0..h).step_by(stride) {
        for x in (0..w).step_by(stride) {
            if target_truth.depth.depth_at(x, y).is_some() && *target_truth.alpha.get(x, y) > 0.5 {
                pixels.push((x, y));
            }
        }
    }
    let range = depth_range(pixels.iter().map(|&(x, y)| *target_truth.depth.get(x, y)));
    let mut c = Corruptor::new(&spec, 2 * stream, w, h, range);
    let mut depth_target = Plane::filled(w, h, f64::NAN);
    let mut gaussians = GaussianScene::new();
    let mut gt_points = Vec::with_capacity(pixels.len());
    let sigma_px = lift.footprint * stride as f64;
    for &(x, y) in &pixels {
        let z_true = *target_truth.depth.get(x, y);
        let z = c.corrupt(z_true, x as f64, y as f64);
        *depth_target.get_mut(x, y) = z;
        gt_points.push(target_cam.unproject(x as f64, y as f64, z_true));
        gaussians.push(
            pixel_splat(
                target_cam,
                x as f64,
                y as f64,
                z,
                sigma_px,
                lift.opacity,
                *reference.get(x, y),
            ),
            Provenance::Target,
        );
    }
    TargetPrediction {
        gaussians,
        depth_target,
        depth_anchor: corrupt_depth_map(anchor_truth_depth, &spec, 2 * stream + 1),
        gt_points,
        pixels,
        pair_factor,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth_align::{fit_affine_depth_ransac, RansacConfig};

    fn small(preset: Preset, n: usize, seed: u64) -> OracleScene {
        let mut spec = SceneSpec::new(preset, n, seed);
        spec.width = 48;
        spec.height = 48;
        spec.n_frames = 6;
        generate_synthetic_scene(&spec, &RenderConfig::default())
    }

    #[test]
    fn deterministic_per_seed() {
        let a = small(Preset::Room, 3000, 4);
        let b = small(Preset::Room, 3000, 4);
        assert_eq!(
            crate::ply::encode_scene_ply(&a.gt_scene),
            crate::ply::encode_scene_ply(&b.gt_scene)
        );
        assert_eq!(a.gt_renders, b.gt_renders);
        assert_eq!(a.gt_scene.len(), 3000);
    }

    #[test]
    fn room_depths_are_bounded() {
        let o = small(Preset::Room, 4000, 1);
        let diag = o.diagonal();
        for r in &o.gt_renders {
            for d in r.depth.as_slice().iter().filter(|d| d.is_finite()) {
                assert!(*d > 0.01 && *d <= diag, "{d}");
            }
        }
    }

    #[test]
    fn single_primitive_scene() {
        let o = small(Preset::Room, 1, 2);
        assert_eq!(o.gt_scene.len(), 1);
        let visible = o
            .cameras
            .iter()
            .filter(|c| {
                crate::render::project_gaussian(
                    &o.gt_scene.primitives()[0],
                    c,
                    &RenderConfig::default(),
                )
                .visible
            })
            .count();
        assert!(visible <= o.cameras.len());
    }

    #[test]
    fn terrain_generates() {
        let o = small(Preset::Terrain, 2000, 3);
        assert!(
            o.gt_renders[0]
                .alpha
                .as_slice()
                .iter()
                .filter(|&&a| a > 0.5)
                .count()
                > 48 * 48 / 4
        );
    }

    #[test]
    fn identity_corruption_is_noop() {
        let o = small(Preset::Room, 2000, 5);
        let cam = &o.cameras[0];
        let corrupted = corrupt_target_prediction(&o.gt_scene, cam, &CorruptionSpec::identity());
        for (a, b) in corrupted.primitives().iter().zip(o.gt_scene.primitives()) {
            assert!((a.mean - b.mean).norm() < 1e-9);
        }
    }

    #[test]
    fn affine_only_depth_is_exactly_recoverable() {
        let o = small(Preset::Room, 3000, 6);
        let spec = CorruptionSpec {
            affine_scale: 1.5,
            affine_shift: 0.2,
            ..CorruptionSpec::identity()
        };
        let truth = &o.gt_renders[2].depth;
        let pred = corrupt_depth_map(truth, &spec, 1);
        let valid = truth.map(|d| d.is_finite());
        let fit = fit_affine_depth_ransac(&pred, truth, &valid, &RansacConfig::default()).unwrap();
        assert!(
            (fit.scale - 1.5).abs() < 1e-9 && (fit.shift - 0.2).abs() < 1e-9,
            "{fit:?}"
        );
    }

    #[test]
    fn distortion_field_has_zero_mean() {
        let f = DistortionField::new(7, 64, 48);
        let mean: f64 = (0..48)
            .flat_map(|y| (0..64).map(move |x| (x, y)))
            .map(|(x, y)| f.at(x as f64, y as f64))
            .sum::<f64>()
            / (64.0 * 48.0);
        assert!(mean.abs() < 1e-12, "{mean}");
    }

    #[test]
    fn reference_image_degradation() {
        let o = small(Preset::Room, 3000, 8);
        let cfg = RenderConfig::default();
        let clean = make_reference_image(&o.gt_scene, &o.cameras[1], &Degradation::default(), &cfg);
        assert_eq!(clean, o.gt_renders[1].rgb);
        let blurred = make_reference_image(
            &o.gt_scene,
            &o.cameras[1],
            &Degradation {
                blur_sigma_px: 1.0,
                ..Default::default()
            },
            &cfg,
        );
        let db = crate::metrics::psnr(&clean, &blurred).unwrap();
        assert!(db.is_finite() && db > 20.0, "{db}");
    }

    #[test]
    fn baseline_scaling_of_pair_factor() {
        let o = small(Preset::Room, 100, 9);
        let spec = CorruptionSpec::default();
        let near = spec.pair_factor(&o.cameras[5], &o.cameras[4]);
        let far = spec.pair_factor(&o.cameras[5], &o.cameras[0]);
        assert!(near > far && far >= 1.0);
    }
}
