//! Shared fixtures: random scenes and a naive reference rasterizer that
//! shares no code with the tiled renderer.

#![allow(dead_code)]

use nalgebra::{Matrix2, Matrix3, Quaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use splatfill::{Camera, GaussianPrimitive, GaussianScene, Provenance, RenderConfig};

pub fn camera(size: u32) -> Camera {
    let f = 1.1 * size as f64;
    let c = 0.5 * (size as f64 - 1.0);
    Camera::new(
        f,
        f,
        c,
        c,
        Matrix3::identity(),
        Vector3::zeros(),
        size,
        size,
    )
    .unwrap()
}

/// Primitives in front of `camera(size)` with distinct camera depths at
/// least `min_gap` apart, opacities in `[0.05, max_opacity]`.
pub fn random_scene(
    seed: u64,
    n: usize,
    size: u32,
    max_opacity: f64,
    min_gap: f64,
) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = camera(size);
    let (near, span) = (8.0, 8.0 + n as f64 * min_gap * 2.0);
    // Distinct depth slots, shuffled so storage order differs from depth order.
    let mut slots: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        slots.swap(i, rng.random_range(0..=i));
    }
    let mut scene = GaussianScene::new();
    for &slot in &slots {
        let z = near + span * (slot as f64 + 0.5 * rng.random::<f64>()) / n as f64;
        let u = rng.random_range(6.0..size as f64 - 7.0);
        let v = rng.random_range(6.0..size as f64 - 7.0);
        let mean = cam.unproject(u, v, z);
        let px = rng.random_range(0.8..3.5);
        let scale = Vector3::new(
            z * px / cam.fx(),
            z * px * rng.random_range(0.5..1.5) / cam.fx(),
            z * px * rng.random_range(0.2..1.0) / cam.fx(),
        );
        let rotation = Quaternion::new(
            rng.random_range(0.1..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let color = Vector3::new(rng.random(), rng.random(), rng.random());
        let opacity = rng.random_range(0.05..max_opacity);
        scene.push(
            GaussianPrimitive::new(mean, rotation, scale, opacity, color).unwrap(),
            Provenance::Context,
        );
    }
    scene
}

pub struct Naive {
    pub rgb: Vec<[f64; 3]>,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
}

struct Projected {
    z: f64,
    index: usize,
    mean: Vector2<f64>,
    inv: Matrix2<f64>,
    opacity: f64,
    color: [f64; 3],
}

fn project(
    p: &GaussianPrimitive,
    index: usize,
    cam: &Camera,
    cfg: &RenderConfig,
) -> Option<Projected> {
    let pc = cam.rotation() * p.mean + cam.translation();
    if pc.z <= cfg.near {
        return None;
    }
    let (fx, fy) = (cam.fx(), cam.fy());
    let lx = cfg.guard_band * 0.5 * cam.width() as f64 / fx;
    let ly = cfg.guard_band * 0.5 * cam.height() as f64 / fy;
    let tx = (pc.x / pc.z).max(-lx).min(lx);
    let ty = (pc.y / pc.z).max(-ly).min(ly);
    let j = nalgebra::Matrix2x3::new(
        fx / pc.z,
        0.0,
        -fx * tx / pc.z,
        0.0,
        fy / pc.z,
        -fy * ty / pc.z,
    );
    let r = p.rotation.to_rotation_matrix().into_inner();
    let s = Matrix3::from_diagonal(&p.scale);
    let sigma = cam.rotation() * (r * s * s * r.transpose()) * cam.rotation().transpose();
    let mut cov = j * sigma * j.transpose();
    cov[(0, 0)] += cfg.low_pass;
    cov[(1, 1)] += cfg.low_pass;
    let mean = Vector2::new(fx * pc.x / pc.z + cam.cx(), fy * pc.y / pc.z + cam.cy());
    let (mx, my) = (3.0 * cov[(0, 0)].sqrt(), 3.0 * cov[(1, 1)].sqrt());
    let (w, h) = (cam.width() as f64, cam.height() as f64);
    if mean.x < -mx || mean.x > w - 1.0 + mx || mean.y < -my || mean.y > h - 1.0 + my {
        return None;
    }
    let inv = cov.try_inverse()?;
    Some(Projected {
        z: pc.z,
        index,
        mean,
        inv,
        opacity: p.opacity,
        color: [p.color.x, p.color.y, p.color.z],
    })
}

/// Per-pixel compositing over every primitive in global depth order.
pub fn naive_render(scene: &GaussianScene, cam: &Camera, cfg: &RenderConfig) -> Naive {
    let mut splats: Vec<Projected> = scene
        .primitives()
        .iter()
        .enumerate()
        .filter_map(|(i, p)| project(p, i, cam, cfg))
        .collect();
    splats.sort_by(|a, b| a.z.partial_cmp(&b.z).unwrap().then(a.index.cmp(&b.index)));
    let (w, h) = (cam.width() as usize, cam.height() as usize);
    let mut out = Naive {
        rgb: vec![[0.0; 3]; w * h],
        alpha: vec![0.0; w * h],
        depth: vec![f64::NAN; w * h],
    };
    for y in 0..h {
        for x in 0..w {
            let mut t = 1.0;
            let (mut rgb, mut alpha, mut dnum) = ([0.0; 3], 0.0, 0.0);
            for s in &splats {
                let d = Vector2::new(x as f64, y as f64) - s.mean;
                let g = (-0.5 * d.dot(&(s.inv * d))).exp();
                if g < cfg.weight_cutoff {
                    continue;
                }
                let a = (s.opacity * g).min(cfg.alpha_clamp);
                for c in 0..3 {
                    rgb[c] += t * a * s.color[c];
                }
                alpha += t * a;
                dnum += t * a * s.z;
                t *= 1.0 - a;
                if t < cfg.min_transmittance {
                    break;
                }
            }
            let k = y * w + x;
            out.rgb[k] = [0, 1, 2].map(|c| rgb[c] + t * cfg.background[c]);
            out.alpha[k] = alpha;
            if alpha > cfg.depth_alpha_min {
                out.depth[k] = dnum / alpha;
            }
        }
    }
    out
}

/// Worst relative disagreement between analytic and central-difference
/// gradients on one random scene, for ray distance and opacity.
pub struct GradientCheck {
    pub worst_distance: f64,
    pub worst_opacity: f64,
    /// `‖analytic − numeric‖ / ‖numeric‖` over all checked primitives.
    pub norm_distance: f64,
    pub norm_opacity: f64,
    pub checked: usize,
    /// Distance probes skipped because a step of `hd` moved some pixel
    /// across the depth-validity threshold, where the loss jumps.
    pub straddling: usize,
}

fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Checks `∂L/∂d_i` (step `hd`) and `∂L/∂α_i` (h = 1e-4) for the linear
/// loss `L = Σ_p w_p·rgb_p + v_p·depth_p` with random per-pixel weights.
///
/// The weight cutoff makes the image a step function of position at the
/// support boundary, and alpha-normalized depth amplifies those steps where
/// coverage is faint. Checks at `hd = 1e-3` therefore use a config whose
/// cutoff is far below anything a step of that size can reveal. Depth is
/// undefined below the validity alpha, so a probe that flips any pixel's
/// validity measures a jump, not a slope; such probes are counted instead.
pub fn gradient_check(
    seed: u64,
    n: usize,
    size: u32,
    cfg: &RenderConfig,
    hd: f64,
) -> GradientCheck {
    use splatfill::render::{backward_opacity, backward_ray_distance, PixelGrads};
    use splatfill::{render, Plane};

    let cam = camera(size);
    let mut scene = random_scene(seed, n, size, 0.9, 0.01);
    scene.retag_all(Provenance::Context, Provenance::Target);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let (w, h) = (size as usize, size as usize);
    let grads = PixelGrads {
        rgb: Plane::from_fn(w, h, |_, _| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        }),
        depth: Plane::from_fn(w, h, |_, _| rng.random_range(-1.0..1.0)),
    };
    // Loss plus the set of pixels whose depth is valid.
    let loss = |s: &GaussianScene, with_depth: bool| {
        let r = render(s, &cam, cfg);
        let mut l = 0.0;
        let mut valid = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let (c, g) = (r.rgb.get(x, y), grads.rgb.get(x, y));
                l += c[0] * g[0] + c[1] * g[1] + c[2] * g[2];
                let d = *r.depth.get(x, y);
                valid.push(d.is_finite());
                if with_depth && d.is_finite() {
                    l += d * grads.depth.get(x, y);
                }
            }
        }
        (l, valid)
    };

    let dirs: Vec<Option<Vector3<f64>>> = scene
        .primitives()
        .iter()
        .map(|p| Some(p.mean.normalize()))
        .collect();
    let analytic_d = backward_ray_distance(&scene, &cam, cfg, &grads, &dirs).unwrap();
    let indices: Vec<usize> = (0..scene.len()).collect();
    let analytic_a = backward_opacity(&scene, &cam, cfg, &grads.rgb, &indices).unwrap();

    let scale_d = analytic_d.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let scale_a = analytic_a.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let (mut worst_distance, mut worst_opacity) = (0.0f64, 0.0f64);
    let mut straddling = 0;
    // Squared norms of the error and of the numeric gradient.
    let (mut err_d, mut ref_d, mut err_a, mut ref_a) = (0.0, 0.0, 0.0, 0.0);
    let (_, valid0) = loss(&scene, true);
    for i in 0..scene.len() {
        let base = scene.primitives()[i].clone();
        let r = dirs[i].unwrap();
        let d0 = base.mean.norm();
        let mut probe = scene.clone();
        let mut at = |d: f64| {
            probe.primitives_mut()[i].mean = r * d;
            loss(&probe, true)
        };
        let ((hi, valid_hi), (lo, valid_lo)) = (at(d0 + hd), at(d0 - hd));
        if valid_hi != valid0 || valid_lo != valid0 {
            straddling += 1;
        } else {
            let numeric = (hi - lo) / (2.0 * hd);
            worst_distance =
                worst_distance.max(relative_error(analytic_d[i], numeric, 1e-6 * scale_d));
            err_d += (analytic_d[i] - numeric).powi(2);
            ref_d += numeric * numeric;
        }

        let mut probe = scene.clone();
        let ha = 1e-4;
        let mut at = |a: f64| {
            probe.primitives_mut()[i].opacity = a;
            loss(&probe, false).0
        };
        let numeric = (at(base.opacity + ha) - at(base.opacity - ha)) / (2.0 * ha);
        worst_opacity = worst_opacity.max(relative_error(analytic_a[i], numeric, 1e-6 * scale_a));
        err_a += (analytic_a[i] - numeric).powi(2);
        ref_a += numeric * numeric;
    }
    GradientCheck {
        worst_distance,
        worst_opacity,
        norm_distance: (err_d / ref_d).sqrt(),
        norm_opacity: (err_a / ref_a).sqrt(),
        checked: scene.len() - straddling,
        straddling,
    }
}

/// Renderer settings for finite-difference checks at millimetre steps.
pub fn smooth_config() -> RenderConfig {
    RenderConfig {
        weight_cutoff: 1e-12,
        ..RenderConfig::default()
    }
}
