//! Tile-based EWA splat rasterizer with analytic gradients for ray distance
//! and opacity.
//!
//! Pixel centres sit at integer coordinates. Splats are sorted globally by
//! camera depth (ties broken by storage index), binned into square tiles and
//! composited front to back per pixel. The backward pass recomputes each
//! pixel's forward walk and then sweeps it back to front.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Camera;
use crate::plane::{DepthMap, Plane, RgbImage};
use crate::scene::{GaussianPrimitive, GaussianScene, Provenance};

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("primitive {index} is not ray-parameterized")]
    NotRayParameterized { index: usize },
    #[error("primitive index {index} out of range for {len} primitives")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("gradient buffers are {got_w}x{got_h}, camera is {want_w}x{want_h}")]
    ShapeMismatch {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    /// Splats with camera depth at or below this are culled.
    pub near: f64,
    /// Added to both diagonal entries of the projected covariance, in px².
    pub low_pass: f64,
    /// Upper bound on the per-pixel weight `α·g`.
    pub alpha_clamp: f64,
    /// Compositing stops once transmittance falls below this.
    pub min_transmittance: f64,
    /// Splats whose Gaussian falloff `g` is below this contribute nothing at
    /// a pixel. It also fixes the screen-space support radius.
    pub weight_cutoff: f64,
    /// Accumulated alpha below which depth is reported invalid.
    pub depth_alpha_min: f64,
    pub tile_size: usize,
    pub background: [f64; 3],
    /// The projection Jacobian is evaluated with `x/z`, `y/z` clamped to
    /// this multiple of the half field of view.
    pub guard_band: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            near: 0.01,
            low_pass: 0.3,
            alpha_clamp: 0.99,
            min_transmittance: 1e-4,
            weight_cutoff: 1e-6,
            depth_alpha_min: 1e-6,
            tile_size: 16,
            background: [0.0; 3],
            guard_band: 1.3,
        }
    }
}

impl RenderConfig {
    /// Support radius in Mahalanobis units implied by `weight_cutoff`.
    pub fn support_sigma(&self) -> f64 {
        (2.0 * (1.0 / self.weight_cutoff).ln()).sqrt()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderBuffers {
    pub rgb: RgbImage,
    /// Alpha-normalized expected planar depth, `NaN` where alpha is too small.
    pub depth: DepthMap,
    pub alpha: Plane<f64>,
}

impl RenderBuffers {
    pub fn width(&self) -> usize {
        self.rgb.width()
    }

    pub fn height(&self) -> usize {
        self.rgb.height()
    }
}

/// Screen-space footprint of one primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct SplatProjection {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub z_cam: f64,
    pub visible: bool,
    /// Inclusive pixel bounds of the support, clipped to the image. Only
    /// meaningful when `visible`.
    pub bounds: [usize; 4],
}

struct Footprint {
    p_cam: Vector3<f64>,
    j: Matrix2x3<f64>,
    /// Σ in camera coordinates.
    m: Matrix3<f64>,
    mean2d: Vector2<f64>,
    cov2d: Matrix2<f64>,
    /// Whether `x/z`, `y/z` were clamped to the guard band inside `j`.
    clamped: [bool; 2],
}

fn footprint(prim: &GaussianPrimitive, cam: &Camera, cfg: &RenderConfig) -> Option<Footprint> {
    let p_cam = cam.world_to_camera(&prim.mean);
    if !(p_cam.z > cfg.near) {
        return None;
    }
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    let (fx, fy) = (cam.fx(), cam.fy());
    // The affine approximation degrades off-axis; evaluate the Jacobian no
    // further out than the guard band so near-plane splats stay bounded.
    let lim_x = cfg.guard_band * 0.5 * cam.width() as f64 / fx;
    let lim_y = cfg.guard_band * 0.5 * cam.height() as f64 / fy;
    let xc = (x / z).clamp(-lim_x, lim_x) * z;
    let yc = (y / z).clamp(-lim_y, lim_y) * z;
    let clamped = [xc != x, yc != y];
    let j = Matrix2x3::new(
        fx / z,
        0.0,
        -fx * xc / (z * z),
        0.0,
        fy / z,
        -fy * yc / (z * z),
    );
    let w = cam.rotation();
    let m = w * prim.covariance() * w.transpose();
    let mut cov2d = j * m * j.transpose();
    let off = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(0, 1)] = off;
    cov2d[(1, 0)] = off;
    cov2d[(0, 0)] += cfg.low_pass;
    cov2d[(1, 1)] += cfg.low_pass;
    let mean2d = Vector2::new(fx * x / z + cam.cx(), fy * y / z + cam.cy());
    Some(Footprint {
        p_cam,
        j,
        m,
        mean2d,
        cov2d,
        clamped,
    })
}

/// The mean must land inside the image expanded by three footprint σ.
fn within_border(f: &Footprint, cam: &Camera) -> bool {
    let mx = 3.0 * f.cov2d[(0, 0)].sqrt();
    let my = 3.0 * f.cov2d[(1, 1)].sqrt();
    let (w, h) = (cam.width() as f64, cam.height() as f64);
    f.mean2d.x >= -mx
        && f.mean2d.x <= w - 1.0 + mx
        && f.mean2d.y >= -my
        && f.mean2d.y <= h - 1.0 + my
}

fn support_bounds(
    mean2d: &Vector2<f64>,
    cov2d: &Matrix2<f64>,
    cam: &Camera,
    cfg: &RenderConfig,
) -> Option<[usize; 4]> {
    let k = cfg.support_sigma();
    // One pixel of slack keeps the box a strict superset of the cutoff ellipse.
    let hx = k * cov2d[(0, 0)].sqrt() + 1.0;
    let hy = k * cov2d[(1, 1)].sqrt() + 1.0;
    let (w, h) = (cam.width() as f64, cam.height() as f64);
    let x0 = (mean2d.x - hx).floor().max(0.0);
    let x1 = (mean2d.x + hx).ceil().min(w - 1.0);
    let y0 = (mean2d.y - hy).floor().max(0.0);
    let y1 = (mean2d.y + hy).ceil().min(h - 1.0);
    if !(x0 <= x1 && y0 <= y1) {
        return None;
    }
    Some([x0 as usize, x1 as usize, y0 as usize, y1 as usize])
}

/// Projects one primitive through the camera.
pub fn project_gaussian(
    prim: &GaussianPrimitive,
    cam: &Camera,
    cfg: &RenderConfig,
) -> SplatProjection {
    let p_cam = cam.world_to_camera(&prim.mean);
    match footprint(prim, cam, cfg) {
        Some(f) => {
            let bounds = support_bounds(&f.mean2d, &f.cov2d, cam, cfg);
            SplatProjection {
                mean2d: f.mean2d,
                cov2d: f.cov2d,
                z_cam: p_cam.z,
                visible: bounds.is_some() && f.cov2d.determinant() > 0.0 && within_border(&f, cam),
                bounds: bounds.unwrap_or([0; 4]),
            }
        }
        None => SplatProjection {
            mean2d: Vector2::new(f64::NAN, f64::NAN),
            cov2d: Matrix2::zeros(),
            z_cam: p_cam.z,
            visible: false,
            bounds: [0; 4],
        },
    }
}

/// Hot-loop data for one visible splat.
#[derive(Clone, Copy, Debug)]
struct Splat {
    index: usize,
    u: f64,
    v: f64,
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    z: f64,
}

impl Splat {
    #[inline]
    fn power(&self, px: f64, py: f64) -> (f64, f64, f64) {
        let dx = px - self.u;
        let dy = py - self.v;
        let [a, b, c] = self.conic;
        (
            -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy),
            dx,
            dy,
        )
    }
}

struct Prepared {
    splats: Vec<Splat>,
    /// Per tile, indices into `splats` in front-to-back order.
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    tiles_y: usize,
}

fn prepare(prims: &[GaussianPrimitive], cam: &Camera, cfg: &RenderConfig) -> Prepared {
    let mut projected: Vec<(Splat, [usize; 4])> = prims
        .par_iter()
        .enumerate()
        .filter_map(|(index, prim)| {
            let f = footprint(prim, cam, cfg)?;
            let det = f.cov2d[(0, 0)] * f.cov2d[(1, 1)] - f.cov2d[(0, 1)] * f.cov2d[(0, 1)];
            if !(det > 0.0) || !within_border(&f, cam) {
                return None;
            }
            let bounds = support_bounds(&f.mean2d, &f.cov2d, cam, cfg)?;
            let conic = [
                f.cov2d[(1, 1)] / det,
                -f.cov2d[(0, 1)] / det,
                f.cov2d[(0, 0)] / det,
            ];
            Some((
                Splat {
                    index,
                    u: f.mean2d.x,
                    v: f.mean2d.y,
                    conic,
                    opacity: prim.opacity,
                    color: [prim.color.x, prim.color.y, prim.color.z],
                    z: f.p_cam.z,
                },
                bounds,
            ))
        })
        .collect();
    projected.sort_by(|a, b| a.0.z.total_cmp(&b.0.z).then(a.0.index.cmp(&b.0.index)));

    let ts = cfg.tile_size.max(1);
    let tiles_x = (cam.width() as usize).div_ceil(ts);
    let tiles_y = (cam.height() as usize).div_ceil(ts);
    let mut tiles = vec![Vec::new(); tiles_x * tiles_y];
    let mut splats = Vec::with_capacity(projected.len());
    for (slot, (splat, [x0, x1, y0, y1])) in projected.into_iter().enumerate() {
        for ty in y0 / ts..=y1 / ts {
            for tx in x0 / ts..=x1 / ts {
                tiles[ty * tiles_x + tx].push(slot as u32);
            }
        }
        splats.push(splat);
    }
    Prepared {
        splats,
        tiles,
        tiles_x,
        tiles_y,
    }
}

fn tile_pixels(
    tile: usize,
    tiles_x: usize,
    ts: usize,
    w: usize,
    h: usize,
) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let tx = tile % tiles_x;
    let ty = tile / tiles_x;
    (
        tx * ts..((tx + 1) * ts).min(w),
        ty * ts..((ty + 1) * ts).min(h),
    )
}

#[derive(Clone, Copy, Default)]
struct PixelOut {
    rgb: [f64; 3],
    alpha: f64,
    depth_num: f64,
    transmittance: f64,
}

/// Exponent below which `exp` is certainly under the weight cutoff. The
/// margin keeps the exact `g < cutoff` test authoritative.
#[inline]
fn log_cutoff(cfg: &RenderConfig) -> f64 {
    cfg.weight_cutoff.ln() - 1e-6
}

#[inline]
fn composite_pixel(
    splats: &[Splat],
    list: &[u32],
    px: f64,
    py: f64,
    cfg: &RenderConfig,
) -> PixelOut {
    let mut out = PixelOut {
        transmittance: 1.0,
        ..Default::default()
    };
    let skip_below = log_cutoff(cfg);
    for &slot in list {
        let s = &splats[slot as usize];
        let (power, _, _) = s.power(px, py);
        if power < skip_below {
            continue;
        }
        let g = power.exp();
        if g < cfg.weight_cutoff {
            continue;
        }
        let a = (s.opacity * g).min(cfg.alpha_clamp);
        let w = out.transmittance * a;
        out.rgb[0] += w * s.color[0];
        out.rgb[1] += w * s.color[1];
        out.rgb[2] += w * s.color[2];
        out.alpha += w;
        out.depth_num += w * s.z;
        out.transmittance *= 1.0 - a;
        if out.transmittance < cfg.min_transmittance {
            break;
        }
    }
    out
}

/// Renders a scene.
pub fn render(scene: &GaussianScene, cam: &Camera, cfg: &RenderConfig) -> RenderBuffers {
    render_primitives(scene.primitives(), cam, cfg)
}

pub fn render_primitives(
    prims: &[GaussianPrimitive],
    cam: &Camera,
    cfg: &RenderConfig,
) -> RenderBuffers {
    let (w, h) = (cam.width() as usize, cam.height() as usize);
    let prep = prepare(prims, cam, cfg);
    let ts = cfg.tile_size.max(1);
    let tile_outputs: Vec<Vec<PixelOut>> = (0..prep.tiles_x * prep.tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (xs, ys) = tile_pixels(tile, prep.tiles_x, ts, w, h);
            let list = &prep.tiles[tile];
            let mut out = Vec::with_capacity(xs.len() * ys.len());
            for y in ys {
                for x in xs.clone() {
                    out.push(composite_pixel(&prep.splats, list, x as f64, y as f64, cfg));
                }
            }
            out
        })
        .collect();

    let mut rgb = Plane::filled(w, h, [0.0; 3]);
    let mut depth = Plane::filled(w, h, f64::NAN);
    let mut alpha = Plane::filled(w, h, 0.0);
    for (tile, outs) in tile_outputs.into_iter().enumerate() {
        let (xs, ys) = tile_pixels(tile, prep.tiles_x, ts, w, h);
        let mut it = outs.into_iter();
        for y in ys {
            for x in xs.clone() {
                let p = it.next().expect("tile output size");
                let t = p.transmittance;
                *rgb.get_mut(x, y) = [
                    p.rgb[0] + t * cfg.background[0],
                    p.rgb[1] + t * cfg.background[1],
                    p.rgb[2] + t * cfg.background[2],
                ];
                *alpha.get_mut(x, y) = p.alpha;
                if p.alpha > cfg.depth_alpha_min {
                    *depth.get_mut(x, y) = p.depth_num / p.alpha;
                }
            }
        }
    }
    RenderBuffers { rgb, depth, alpha }
}

/// Upstream gradients of a scalar loss with respect to the rendered
/// buffers. Depth gradients at invalid pixels are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelGrads {
    pub rgb: RgbImage,
    pub depth: DepthMap,
}

impl PixelGrads {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            rgb: Plane::filled(width, height, [0.0; 3]),
            depth: Plane::filled(width, height, 0.0),
        }
    }

    pub fn for_camera(cam: &Camera) -> Self {
        Self::zeros(cam.width() as usize, cam.height() as usize)
    }
}

/// Per-primitive gradients of the loss with respect to the world-space mean
/// and the opacity.
#[derive(Clone, Debug, PartialEq)]
pub struct PrimitiveGrads {
    pub mean: Vec<Vector3<f64>>,
    pub opacity: Vec<f64>,
}

/// Per-splat accumulators in screen space.
#[derive(Clone, Copy, Default)]
struct ScreenGrad {
    u: f64,
    v: f64,
    conic: [f64; 3],
    z: f64,
    opacity: f64,
}

impl ScreenGrad {
    fn add(&mut self, o: &ScreenGrad) {
        self.u += o.u;
        self.v += o.v;
        self.conic[0] += o.conic[0];
        self.conic[1] += o.conic[1];
        self.conic[2] += o.conic[2];
        self.z += o.z;
        self.opacity += o.opacity;
    }
}

struct Contribution {
    /// Position in the tile list.
    pos: usize,
    slot: u32,
    a: f64,
    t: f64,
    g: f64,
    clamped: bool,
    dx: f64,
    dy: f64,
}

/// Front-to-back walk of one pixel recording every contribution.
fn walk_pixel(
    splats: &[Splat],
    list: &[u32],
    px: f64,
    py: f64,
    cfg: &RenderConfig,
    walk: &mut Vec<Contribution>,
) -> PixelOut {
    walk.clear();
    let mut out = PixelOut {
        transmittance: 1.0,
        ..Default::default()
    };
    let skip_below = log_cutoff(cfg);
    for (pos, &slot) in list.iter().enumerate() {
        let s = &splats[slot as usize];
        let (power, dx, dy) = s.power(px, py);
        if power < skip_below {
            continue;
        }
        let g = power.exp();
        if g < cfg.weight_cutoff {
            continue;
        }
        let raw = s.opacity * g;
        let a = raw.min(cfg.alpha_clamp);
        let t = out.transmittance;
        walk.push(Contribution {
            pos,
            slot,
            a,
            t,
            g,
            clamped: raw > cfg.alpha_clamp,
            dx,
            dy,
        });
        let w = t * a;
        out.rgb[0] += w * s.color[0];
        out.rgb[1] += w * s.color[1];
        out.rgb[2] += w * s.color[2];
        out.alpha += w;
        out.depth_num += w * s.z;
        out.transmittance *= 1.0 - a;
        if out.transmittance < cfg.min_transmittance {
            break;
        }
    }
    out
}

/// Back-to-front sweep accumulating screen-space gradients of one pixel.
fn sweep_pixel(
    splats: &[Splat],
    walk: &[Contribution],
    out: &PixelOut,
    cfg: &RenderConfig,
    g_rgb: [f64; 3],
    g_depth: f64,
    local: &mut [ScreenGrad],
) {
    if walk.is_empty() {
        return;
    }
    let alpha = out.alpha;
    let (g_a, g_n) = if alpha > cfg.depth_alpha_min && g_depth != 0.0 {
        (-g_depth * out.depth_num / (alpha * alpha), g_depth / alpha)
    } else {
        (0.0, 0.0)
    };
    // Background enters as T_final·bg; its derivative w.r.t. a_k is
    // -T_final/(1-a_k)·bg, folded into the suffix sum.
    let bg =
        g_rgb[0] * cfg.background[0] + g_rgb[1] * cfg.background[1] + g_rgb[2] * cfg.background[2];
    let mut suffix = out.transmittance * bg;
    for c in walk.iter().rev() {
        let s = &splats[c.slot as usize];
        let h =
            g_rgb[0] * s.color[0] + g_rgb[1] * s.color[1] + g_rgb[2] * s.color[2] + g_a + g_n * s.z;
        let d_a = c.t * h - suffix / (1.0 - c.a);
        suffix += c.t * c.a * h;
        let acc = &mut local[c.pos];
        acc.z += c.t * c.a * g_n;
        if c.clamped {
            continue;
        }
        acc.opacity += d_a * c.g;
        let d_power = d_a * s.opacity * c.g;
        let [ca, cb, cc] = s.conic;
        acc.u += d_power * (ca * c.dx + cb * c.dy);
        acc.v += d_power * (cb * c.dx + cc * c.dy);
        acc.conic[0] += d_power * (-0.5 * c.dx * c.dx);
        acc.conic[1] += d_power * (-c.dx * c.dy);
        acc.conic[2] += d_power * (-0.5 * c.dy * c.dy);
    }
}

fn check_shape(grads: &PixelGrads, cam: &Camera) -> Result<(), RenderError> {
    let (w, h) = (cam.width() as usize, cam.height() as usize);
    for (gw, gh) in [
        (grads.rgb.width(), grads.rgb.height()),
        (grads.depth.width(), grads.depth.height()),
    ] {
        if gw != w || gh != h {
            return Err(RenderError::ShapeMismatch {
                got_w: gw,
                got_h: gh,
                want_w: w,
                want_h: h,
            });
        }
    }
    Ok(())
}

/// Gradients of a loss with respect to every primitive's mean and opacity.
///
/// Per-tile partial sums are merged in tile order, so results are
/// bit-reproducible regardless of thread count.
pub fn backward(
    prims: &[GaussianPrimitive],
    cam: &Camera,
    cfg: &RenderConfig,
    grads: &PixelGrads,
) -> Result<PrimitiveGrads, RenderError> {
    check_shape(grads, cam)?;
    let (w, h) = (cam.width() as usize, cam.height() as usize);
    let prep = prepare(prims, cam, cfg);
    let ts = cfg.tile_size.max(1);

    let tile_grads: Vec<Vec<ScreenGrad>> = (0..prep.tiles_x * prep.tiles_y)
        .into_par_iter()
        .map(|tile| {
            let list = &prep.tiles[tile];
            let mut local = vec![ScreenGrad::default(); list.len()];
            if list.is_empty() {
                return local;
            }
            let mut walk = Vec::new();
            let (xs, ys) = tile_pixels(tile, prep.tiles_x, ts, w, h);
            for y in ys {
                for x in xs.clone() {
                    let g_rgb = *grads.rgb.get(x, y);
                    let g_depth = *grads.depth.get(x, y);
                    let g_depth = if g_depth.is_finite() { g_depth } else { 0.0 };
                    if g_rgb == [0.0; 3] && g_depth == 0.0 {
                        continue;
                    }
                    let out = walk_pixel(&prep.splats, list, x as f64, y as f64, cfg, &mut walk);
                    sweep_pixel(&prep.splats, &walk, &out, cfg, g_rgb, g_depth, &mut local);
                }
            }
            local
        })
        .collect();

    Ok(merge_tile_grads(prims, cam, cfg, &prep, &tile_grads))
}

/// Sums per-tile partials in tile order and chains them to world space.
fn merge_tile_grads(
    prims: &[GaussianPrimitive],
    cam: &Camera,
    cfg: &RenderConfig,
    prep: &Prepared,
    tile_grads: &[Vec<ScreenGrad>],
) -> PrimitiveGrads {
    let mut screen = vec![ScreenGrad::default(); prep.splats.len()];
    for (tile, local) in tile_grads.iter().enumerate() {
        for (&slot, g) in prep.tiles[tile].iter().zip(local) {
            screen[slot as usize].add(g);
        }
    }
    let mut out = PrimitiveGrads {
        mean: vec![Vector3::zeros(); prims.len()],
        opacity: vec![0.0; prims.len()],
    };
    for (splat, g) in prep.splats.iter().zip(&screen) {
        let f = footprint(&prims[splat.index], cam, cfg).expect("prepared splat has a footprint");
        out.opacity[splat.index] = g.opacity;
        out.mean[splat.index] = mean_gradient(&f, cam, splat, g);
    }
    out
}

/// A loss that decomposes over pixels of one rendered view.
pub trait PixelLoss: Sync {
    /// Loss at pixel `(x, y)` given the rendered colour (background
    /// included) and depth (`None` where invalid), with its gradients with
    /// respect to both. The loss is split into two separately reported
    /// parts whose sum is the objective.
    fn eval(
        &self,
        x: usize,
        y: usize,
        rgb: [f64; 3],
        depth: Option<f64>,
    ) -> ([f64; 2], [f64; 3], f64);
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossAndGrads {
    pub parts: [f64; 2],
    /// `None` when gradients were not requested.
    pub grads: Option<PrimitiveGrads>,
}

impl LossAndGrads {
    pub fn total(&self) -> f64 {
        self.parts[0] + self.parts[1]
    }
}

/// Renders and evaluates `loss` in one pass, optionally back-propagating it
/// in the same per-pixel walk.
///
/// With `active`, tiles touched by no active primitive are skipped: the
/// reported loss then covers only the remaining tiles, which is exact for
/// comparing values that differ only in active primitives' opacities or
/// colours. Per-tile sums are merged in tile order.
pub fn loss_and_gradients(
    prims: &[GaussianPrimitive],
    cam: &Camera,
    cfg: &RenderConfig,
    loss: &dyn PixelLoss,
    active: Option<&[bool]>,
    want_grads: bool,
) -> LossAndGrads {
    let (w, h) = (cam.width() as usize, cam.height() as usize);
    let prep = prepare(prims, cam, cfg);
    let ts = cfg.tile_size.max(1);
    let per_tile: Vec<([f64; 2], Vec<ScreenGrad>)> = (0..prep.tiles_x * prep.tiles_y)
        .into_par_iter()
        .map(|tile| {
            let list = &prep.tiles[tile];
            let mut local = if want_grads {
                vec![ScreenGrad::default(); list.len()]
            } else {
                Vec::new()
            };
            if let Some(active) = active {
                if !list
                    .iter()
                    .any(|&slot| active[prep.splats[slot as usize].index])
                {
                    return ([0.0; 2], local);
                }
            }
            let mut walk = Vec::new();
            let mut sum = [0.0; 2];
            let (xs, ys) = tile_pixels(tile, prep.tiles_x, ts, w, h);
            for y in ys {
                for x in xs.clone() {
                    let out = walk_pixel(&prep.splats, list, x as f64, y as f64, cfg, &mut walk);
                    let t = out.transmittance;
                    let rgb = [
                        out.rgb[0] + t * cfg.background[0],
                        out.rgb[1] + t * cfg.background[1],
                        out.rgb[2] + t * cfg.background[2],
                    ];
                    let depth =
                        (out.alpha > cfg.depth_alpha_min).then(|| out.depth_num / out.alpha);
                    let (l, g_rgb, g_depth) = loss.eval(x, y, rgb, depth);
                    sum[0] += l[0];
                    sum[1] += l[1];
                    if want_grads && (g_rgb != [0.0; 3] || (depth.is_some() && g_depth != 0.0)) {
                        let g_depth = if depth.is_some() && g_depth.is_finite() {
                            g_depth
                        } else {
                            0.0
                        };
                        sweep_pixel(&prep.splats, &walk, &out, cfg, g_rgb, g_depth, &mut local);
                    }
                }
            }
            (sum, local)
        })
        .collect();
    let parts = per_tile
        .iter()
        .fold([0.0; 2], |acc, (l, _)| [acc[0] + l[0], acc[1] + l[1]]);
    let grads = want_grads.then(|| {
        let locals: Vec<Vec<ScreenGrad>> = per_tile.into_iter().map(|(_, g)| g).collect();
        merge_tile_grads(prims, cam, cfg, &prep, &locals)
    });
    LossAndGrads { parts, grads }
}

fn mean_gradient(f: &Footprint, cam: &Camera, splat: &Splat, g: &ScreenGrad) -> Vector3<f64> {
    let (x, y, z) = (f.p_cam.x, f.p_cam.y, f.p_cam.z);
    let (fx, fy) = (cam.fx(), cam.fy());
    let [ca, cb, cc] = splat.conic;
    let conic = Matrix2::new(ca, cb, cb, cc);
    let g_conic = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
    let g_cov = -(conic * g_conic * conic);
    let g_j = 2.0 * g_cov * f.j * f.m;

    let z2 = z * z;
    let z3 = z2 * z;
    // J[0][2] = -fx·xc/z², with xc = x unless clamped, in which case
    // xc = L·z and J[0][2] = -fx·L/z depends on z alone.
    let (jx, jx_z) = if f.clamped[0] {
        (0.0, -f.j[(0, 2)] / z)
    } else {
        (-fx / z2, 2.0 * fx * x / z3)
    };
    let (jy, jy_z) = if f.clamped[1] {
        (0.0, -f.j[(1, 2)] / z)
    } else {
        (-fy / z2, 2.0 * fy * y / z3)
    };
    let gx = g.u * fx / z + g_j[(0, 2)] * jx;
    let gy = g.v * fy / z + g_j[(1, 2)] * jy;
    let gz = g.u * (-fx * x / z2)
        + g.v * (-fy * y / z2)
        + g_j[(0, 0)] * (-fx / z2)
        + g_j[(0, 2)] * jx_z
        + g_j[(1, 1)] * (-fy / z2)
        + g_j[(1, 2)] * jy_z
        + g.z;
    cam.rotation().transpose() * Vector3::new(gx, gy, gz)
}

/// `∂L/∂d_i` for primitives whose means move along `μ_i = c + d_i·r_i`.
///
/// `directions[i]` holds `r_i` for ray-parameterized primitives. Primitives
/// tagged [`Provenance::Target`] must have one; all others receive zero.
pub fn backward_ray_distance(
    scene: &GaussianScene,
    cam: &Camera,
    cfg: &RenderConfig,
    grads: &PixelGrads,
    directions: &[Option<Vector3<f64>>],
) -> Result<Vec<f64>, RenderError> {
    for (index, tag) in scene.provenance().iter().enumerate() {
        if *tag == Provenance::Target && directions.get(index).copied().flatten().is_none() {
            return Err(RenderError::NotRayParameterized { index });
        }
    }
    let g = backward(scene.primitives(), cam, cfg, grads)?;
    Ok((0..scene.len())
        .map(
            |i| match (scene.provenance()[i], directions.get(i).copied().flatten()) {
                (Provenance::Target, Some(r)) => g.mean[i].dot(&r),
                _ => 0.0,
            },
        )
        .collect())
}

/// `∂L/∂α_i` for the primitives in `indices`, in the same order.
pub fn backward_opacity(
    scene: &GaussianScene,
    cam: &Camera,
    cfg: &RenderConfig,
    rgb_grads: &RgbImage,
    indices: &[usize],
) -> Result<Vec<f64>, RenderError> {
    if let Some(&index) = indices.iter().find(|&&i| i >= scene.len()) {
        return Err(RenderError::IndexOutOfRange {
            index,
            len: scene.len(),
        });
    }
    if indices.is_empty() {
        return Ok(Vec::new());
    }
    let grads = PixelGrads {
        rgb: rgb_grads.clone(),
        depth: Plane::filled(rgb_grads.width(), rgb_grads.height(), 0.0),
    };
    let g = backward(scene.primitives(), cam, cfg, &grads)?;
    Ok(indices.iter().map(|&i| g.opacity[i]).collect())
}

/// Central finite differences of `f` around `x`, one coordinate at a time.
/// Slow; meant for debugging and as a test oracle.
pub fn finite_difference(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let hi = f(&probe);
            probe[i] = x[i] - step;
            let lo = f(&probe);
            probe[i] = x[i];
            (hi - lo) / (2.0 * step)
        })
        .collect()
}
