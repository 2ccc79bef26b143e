//! One-degree-of-freedom registration of target Gaussians along their
//! camera rays.
//!
//! Every target primitive is pinned to the ray from the target camera
//! centre through its projected pixel, `μ_i = c + d_i·r_i`, and only the
//! distances `d_i` are optimised. Rotation, scale, opacity and colour are
//! never written.

use std::time::Instant;

use log::warn;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Camera;
use crate::plane::{DepthMap, Mask, Plane, RgbImage};
use crate::render::{finite_difference, loss_and_gradients, PixelLoss, RenderConfig};
use crate::scene::{GaussianPrimitive, GaussianScene, LossWeights};

/// Rays closer than this to perpendicular with the principal axis cannot be
/// unprojected.
pub const GRAZING_LIMIT: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum RegisterError {
    #[error("unprojection singular: ray·axis = {0:e}")]
    UnprojectionSingular(f64),
    #[error("ray parameterization covers {rays} primitives but the scene has {prims}")]
    LengthMismatch { rays: usize, prims: usize },
    #[error("reference buffers do not match camera resolution")]
    ShapeMismatch,
}

/// Planar depth along the principal axis to distance along a ray.
pub fn unproject_to_ray_distance(
    depth_planar: f64,
    ray_dir: &Vector3<f64>,
    principal_axis: &Vector3<f64>,
) -> Result<f64, RegisterError> {
    let cos = ray_dir.dot(principal_axis);
    if !(cos > GRAZING_LIMIT) {
        return Err(RegisterError::UnprojectionSingular(cos));
    }
    Ok(depth_planar / cos)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthSampling {
    #[default]
    Nearest,
    Bilinear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayParameterization {
    pub origin: Vector3<f64>,
    pub directions: Vec<Vector3<f64>>,
    pub distances: Vec<f64>,
}

impl RayParameterization {
    pub fn len(&self) -> usize {
        self.distances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.distances.is_empty()
    }

    pub fn position(&self, i: usize) -> Vector3<f64> {
        self.origin + self.directions[i] * self.distances[i]
    }

    /// Overwrites primitive means with their ray positions.
    pub fn apply(&self, prims: &mut [GaussianPrimitive]) {
        for (i, p) in prims.iter_mut().enumerate() {
            p.mean = self.position(i);
        }
    }
}

/// Outcome of lifting target primitives onto rays.
#[derive(Clone, Debug)]
pub struct RayInit {
    /// Primitives that project into the target image, means on their rays.
    pub scene: GaussianScene,
    pub rays: RayParameterization,
    /// For each kept primitive, its index in the input scene.
    pub kept: Vec<usize>,
    pub excluded: usize,
    /// Kept primitives whose aligned depth was invalid; they retain their
    /// pre-alignment distance.
    pub flagged: Vec<usize>,
}

/// Builds rays from the target camera through each primitive's projection
/// and places it at the aligned depth.
pub fn parameterize_rays(
    tgt: &GaussianScene,
    cam: &Camera,
    aligned_depth: &DepthMap,
    sampling: DepthSampling,
    near: f64,
) -> Result<RayInit, RegisterError> {
    if aligned_depth.width() != cam.width() as usize
        || aligned_depth.height() != cam.height() as usize
    {
        return Err(RegisterError::ShapeMismatch);
    }
    let origin = cam.center();
    let axis = cam.principal_axis();
    let mut kept = Vec::new();
    let mut flagged = Vec::new();
    let mut directions = Vec::new();
    let mut distances = Vec::new();
    for (i, p) in tgt.primitives().iter().enumerate() {
        let pc = cam.world_to_camera(&p.mean);
        if !(pc.z > near) {
            continue;
        }
        let (u, v) = cam.project_camera_point(&pc);
        let Some((x, y)) = aligned_depth.nearest_index(u, v) else {
            continue;
        };
        let r = cam.pixel_ray(u, v);
        let sampled = match sampling {
            DepthSampling::Nearest => aligned_depth.depth_at(x, y),
            DepthSampling::Bilinear => aligned_depth.sample_bilinear(u, v),
        };
        let d = match sampled {
            Some(z) if z > near => unproject_to_ray_distance(z, &r, &axis)?,
            _ => {
                flagged.push(kept.len());
                (p.mean - origin).norm()
            }
        };
        kept.push(i);
        directions.push(r);
        distances.push(d);
    }
    let excluded = tgt.len() - kept.len();
    let rays = RayParameterization {
        origin,
        directions,
        distances,
    };
    let mut scene = tgt.subset(&kept);
    rays.apply(scene.primitives_mut());
    Ok(RayInit {
        scene,
        rays,
        kept,
        excluded,
        flagged,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    GradientDescent,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// How per-pixel L1 residuals are reduced to a loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Averaged over the term's pixels.
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    Analytic,
    /// Central differences per parameter. Only usable on tiny scenes.
    FiniteDifference { step: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegisterConfig {
    pub iterations: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub reduction: Reduction,
    /// Times a step may be halved before the iteration is rejected.
    pub max_backoffs: u32,
    pub gradient: GradientMode,
    pub near: f64,
}

impl Default for RegisterConfig {
    fn default() -> Self {
        Self {
            iterations: 50,
            lr: 0.01,
            optimizer: Optimizer::GradientDescent,
            reduction: Reduction::Sum,
            max_backoffs: 10,
            gradient: GradientMode::Analytic,
            near: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub depth: f64,
    pub stereo: f64,
    pub rgb: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub initial: LossTerms,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Loss terms after each iteration.
    pub trace: Vec<LossTerms>,
    pub iterations_run: usize,
    /// Step halvings per iteration.
    pub backoffs: Vec<u32>,
    /// Iterations where no halving produced a non-increasing loss.
    pub rejected_steps: usize,
    pub warnings: Vec<String>,
    pub abort_reason: Option<String>,
    /// Excluded from serialization so reports are reproducible.
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Observations the target Gaussians are registered against.
pub struct RegistrationRefs<'a> {
    /// Pseudo ground-truth image at the target pose.
    pub reference: &'a RgbImage,
    /// Context depth rendered at the target pose, valid where `target_valid`.
    pub target_depth: &'a DepthMap,
    pub target_valid: &'a Mask,
    pub anchor_depth: &'a DepthMap,
    pub anchor_valid: &'a Mask,
}

struct Problem<'a> {
    target: &'a Camera,
    anchor: &'a Camera,
    refs: &'a RegistrationRefs<'a>,
    weights: LossWeights,
    render: &'a RenderConfig,
    n_ctx: usize,
    norm_depth: f64,
    norm_stereo: f64,
    norm_rgb: f64,
}

/// Depth and colour terms at the target pose, already weighted.
struct TargetLoss<'a> {
    refs: &'a RegistrationRefs<'a>,
    k_depth: f64,
    k_rgb: f64,
}

impl PixelLoss for TargetLoss<'_> {
    fn eval(
        &self,
        x: usize,
        y: usize,
        rgb: [f64; 3],
        depth: Option<f64>,
    ) -> ([f64; 2], [f64; 3], f64) {
        let mut parts = [0.0; 2];
        let mut g_depth = 0.0;
        if self.k_depth != 0.0 {
            let t = *self.refs.target_depth.get(x, y);
            if let (Some(d), true) = (depth, *self.refs.target_valid.get(x, y) && t.is_finite()) {
                parts[0] = self.k_depth * (d - t).abs();
                g_depth = self.k_depth * sign(d - t);
            }
        }
        let mut g_rgb = [0.0; 3];
        if self.k_rgb != 0.0 {
            let r = self.refs.reference.get(x, y);
            for c in 0..3 {
                parts[1] += self.k_rgb * (rgb[c] - r[c]).abs();
                g_rgb[c] = self.k_rgb * sign(rgb[c] - r[c]);
            }
        }
        (parts, g_rgb, g_depth)
    }
}

/// Depth of the target primitives alone at the anchor pose, weighted.
struct StereoLoss<'a> {
    refs: &'a RegistrationRefs<'a>,
    k: f64,
}

impl PixelLoss for StereoLoss<'_> {
    fn eval(
        &self,
        x: usize,
        y: usize,
        _rgb: [f64; 3],
        depth: Option<f64>,
    ) -> ([f64; 2], [f64; 3], f64) {
        let t = *self.refs.anchor_depth.get(x, y);
        match depth {
            Some(d) if *self.refs.anchor_valid.get(x, y) && t.is_finite() => (
                [self.k * (d - t).abs(), 0.0],
                [0.0; 3],
                self.k * sign(d - t),
            ),
            _ => ([0.0; 2], [0.0; 3], 0.0),
        }
    }
}

struct Evaluation {
    terms: LossTerms,
    /// `∂L/∂d_i`, when requested.
    grad: Option<Vec<f64>>,
}

impl Problem<'_> {
    fn evaluate(
        &self,
        prims: &[GaussianPrimitive],
        rays: &RayParameterization,
        want_grad: bool,
    ) -> Evaluation {
        let w = &self.weights;
        let mut terms = LossTerms::default();
        let mut grad = want_grad.then(|| vec![0.0; rays.len()]);
        if w.lambda_d != 0.0 || w.lambda_c != 0.0 {
            let loss = TargetLoss {
                refs: self.refs,
                k_depth: w.lambda_d / self.norm_depth,
                k_rgb: w.lambda_c / self.norm_rgb,
            };
            let r = loss_and_gradients(prims, self.target, self.render, &loss, None, want_grad);
            if w.lambda_d != 0.0 {
                terms.depth = r.parts[0] / w.lambda_d;
            }
            if w.lambda_c != 0.0 {
                terms.rgb = r.parts[1] / w.lambda_c;
            }
            if let (Some(grad), Some(g)) = (grad.as_mut(), r.grads) {
                for (i, out) in grad.iter_mut().enumerate() {
                    *out += g.mean[self.n_ctx + i].dot(&rays.directions[i]);
                }
            }
        }
        if w.lambda_s != 0.0 {
            let loss = StereoLoss {
                refs: self.refs,
                k: w.lambda_s / self.norm_stereo,
            };
            let r = loss_and_gradients(
                &prims[self.n_ctx..],
                self.anchor,
                self.render,
                &loss,
                None,
                want_grad,
            );
            terms.stereo = r.parts[0] / w.lambda_s;
            if let (Some(grad), Some(g)) = (grad.as_mut(), r.grads) {
                for (i, out) in grad.iter_mut().enumerate() {
                    *out += g.mean[i].dot(&rays.directions[i]);
                }
            }
        }
        terms.total = w.lambda_d * terms.depth + w.lambda_s * terms.stereo + w.lambda_c * terms.rgb;
        Evaluation { terms, grad }
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn same_size<T>(p: &Plane<T>, cam: &Camera) -> bool {
    p.width() == cam.width() as usize && p.height() == cam.height() as usize
}

/// Optimises the ray distances of `tgt` against the context.
///
/// The depth and colour terms compare the composite context-plus-target
/// render at the target pose; the stereo term renders the target primitives
/// alone at the anchor pose. A step that would raise the total loss is
/// halved until it does not, up to `max_backoffs` times, and otherwise
/// skipped.
#[allow(clippy::too_many_arguments)]
pub fn ray_constrained_optimize(
    ctx: &GaussianScene,
    tgt: &GaussianScene,
    rays: &RayParameterization,
    target_cam: &Camera,
    anchor_cam: &Camera,
    refs: &RegistrationRefs<'_>,
    weights: &LossWeights,
    cfg: &RegisterConfig,
    render_cfg: &RenderConfig,
) -> Result<(GaussianScene, RayParameterization, RegistrationReport), RegisterError> {
    let start = Instant::now();
    if rays.len() != tgt.len() {
        return Err(RegisterError::LengthMismatch {
            rays: rays.len(),
            prims: tgt.len(),
        });
    }
    if !same_size(refs.reference, target_cam)
        || !same_size(refs.target_depth, target_cam)
        || !same_size(refs.target_valid, target_cam)
        || !same_size(refs.anchor_depth, anchor_cam)
        || !same_size(refs.anchor_valid, anchor_cam)
    {
        return Err(RegisterError::ShapeMismatch);
    }

    let mut report = RegistrationReport::default();
    let n_depth = refs.target_valid.count_true();
    let n_stereo = refs.anchor_valid.count_true();
    if n_depth == 0 && n_stereo == 0 {
        let msg = "both depth validity masks are empty; optimizing the rgb term only".to_owned();
        warn!("{msg}");
        report.warnings.push(msg);
    }
    let norm = |n: usize| match cfg.reduction {
        Reduction::Mean => n.max(1) as f64,
        Reduction::Sum => 1.0,
    };
    let problem = Problem {
        target: target_cam,
        anchor: anchor_cam,
        refs,
        weights: *weights,
        render: render_cfg,
        n_ctx: ctx.len(),
        norm_depth: norm(n_depth),
        norm_stereo: norm(n_stereo),
        norm_rgb: norm(3 * refs.reference.len()),
    };

    let mut prims: Vec<GaussianPrimitive> = ctx.primitives().to_vec();
    prims.extend_from_slice(tgt.primitives());
    let mut rays = rays.clone();
    rays.apply(&mut prims[ctx.len()..]);

    let mut current = problem.evaluate(
        &prims,
        &rays,
        matches!(cfg.gradient, GradientMode::Analytic),
    );
    report.initial = current.terms;
    report.initial_loss = current.terms.total;
    if !current.terms.total.is_finite() {
        report.abort_reason = Some(format!(
            "initial loss is not finite: {}",
            current.terms.total
        ));
        report.final_loss = current.terms.total;
        report.wall_time_s = start.elapsed().as_secs_f64();
        let mut out = tgt.clone();
        rays.apply(out.primitives_mut());
        return Ok((out, rays, report));
    }

    let n = rays.len();
    let (mut m1, mut m2) = (vec![0.0; n], vec![0.0; n]);
    for iter in 0..cfg.iterations {
        let grad = match cfg.gradient {
            GradientMode::Analytic => current.grad.clone().expect("analytic mode keeps gradients"),
            GradientMode::FiniteDifference { step } => {
                let mut probe = prims.clone();
                let base = rays.clone();
                finite_difference(&rays.distances, step, |d| {
                    for (i, &di) in d.iter().enumerate() {
                        probe[problem.n_ctx + i].mean = base.origin + base.directions[i] * di;
                    }
                    problem.evaluate(&probe, &base, false).terms.total
                })
            }
        };
        if grad.iter().any(|g| !g.is_finite()) {
            report.abort_reason = Some(format!("non-finite gradient at iteration {iter}"));
            break;
        }
        let direction: Vec<f64> = match cfg.optimizer {
            Optimizer::GradientDescent => grad.clone(),
            Optimizer::Adam { beta1, beta2, eps } => {
                let t = (iter + 1) as i32;
                (0..n)
                    .map(|i| {
                        m1[i] = beta1 * m1[i] + (1.0 - beta1) * grad[i];
                        m2[i] = beta2 * m2[i] + (1.0 - beta2) * grad[i] * grad[i];
                        let mh = m1[i] / (1.0 - beta1.powi(t));
                        let vh = m2[i] / (1.0 - beta2.powi(t));
                        mh / (vh.sqrt() + eps)
                    })
                    .collect()
            }
        };

        let mut step = cfg.lr;
        let mut halvings = 0;
        let mut accepted = None;
        if direction.iter().any(|&g| g != 0.0) {
            loop {
                let candidate: Vec<f64> = rays
                    .distances
                    .iter()
                    .zip(&direction)
                    .map(|(&d, &g)| (d - step * g).max(cfg.near))
                    .collect();
                let mut probe = prims.clone();
                for (i, &d) in candidate.iter().enumerate() {
                    probe[problem.n_ctx + i].mean = rays.origin + rays.directions[i] * d;
                }
                // The first trial usually succeeds, so it carries the
                // gradient for the next iteration.
                let analytic = matches!(cfg.gradient, GradientMode::Analytic);
                let mut trial_rays = rays.clone();
                trial_rays.distances.clone_from(&candidate);
                let mut eval = problem.evaluate(&probe, &trial_rays, analytic && halvings == 0);
                if analytic && eval.grad.is_none() && eval.terms.total <= current.terms.total {
                    eval.grad = problem.evaluate(&probe, &trial_rays, true).grad;
                }
                if !eval.terms.total.is_finite() {
                    report.abort_reason = Some(format!("non-finite loss at iteration {iter}"));
                    break;
                }
                if eval.terms.total <= current.terms.total {
                    accepted = Some((candidate, probe, eval));
                    break;
                }
                if halvings >= cfg.max_backoffs {
                    break;
                }
                halvings += 1;
                step *= 0.5;
            }
        }
        if report.abort_reason.is_some() {
            break;
        }
        match accepted {
            Some((candidate, probe, eval)) => {
                rays.distances = candidate;
                prims = probe;
                current = eval;
            }
            None if direction.iter().any(|&g| g != 0.0) => report.rejected_steps += 1,
            None => {}
        }
        report.backoffs.push(halvings);
        report.trace.push(current.terms);
        report.iterations_run += 1;
    }
    report.final_loss = current.terms.total;
    report.wall_time_s = start.elapsed().as_secs_f64();
    let mut out = tgt.clone();
    rays.apply(out.primitives_mut());
    Ok((out, rays, report))
}
