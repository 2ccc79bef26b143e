//! Hole-aware merging of registered target Gaussians and opacity-only
//! refinement of the merged primitives.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::plane::{Mask, RgbImage};
use crate::ray_register::Reduction;
use crate::render::{loss_and_gradients, render_primitives, PixelLoss, RenderConfig};
use crate::scene::{GaussianPrimitive, GaussianScene, Provenance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoleMask {
    pub mask: Mask,
    pub tau: f64,
}

impl HoleMask {
    pub fn hole_fraction(&self) -> f64 {
        self.mask.fraction_true()
    }
}

/// `true` where the context's accumulated alpha is below `tau`.
pub fn render_hole_mask(
    ctx: &GaussianScene,
    cam: &Camera,
    tau: f64,
    cfg: &RenderConfig,
) -> HoleMask {
    let alpha = render_primitives(ctx.primitives(), cam, cfg).alpha;
    HoleMask {
        mask: alpha.map(|&a| a < tau),
        tau,
    }
}

/// Keeps primitives whose projected mean lands on a hole pixel. Returns the
/// kept subset and the kept indices into `tgt`.
pub fn filter_by_hole_mask(
    tgt: &GaussianScene,
    mask: &HoleMask,
    cam: &Camera,
    near: f64,
) -> (GaussianScene, Vec<usize>) {
    let kept: Vec<usize> = tgt
        .primitives()
        .iter()
        .enumerate()
        .filter(|(_, p)| {
            let pc = cam.world_to_camera(&p.mean);
            if !(pc.z > near) {
                return false;
            }
            let (u, v) = cam.project_camera_point(&pc);
            mask.mask
                .nearest_index(u, v)
                .is_some_and(|(x, y)| *mask.mask.get(x, y))
        })
        .map(|(i, _)| i)
        .collect();
    (tgt.subset(&kept), kept)
}

/// Context first, then the new primitives tagged as target. Returns the
/// merged scene and the indices of the new primitives in it.
pub fn merge_scenes(
    ctx: &GaussianScene,
    tgt_filtered: &GaussianScene,
) -> (GaussianScene, Vec<usize>) {
    let mut merged = ctx.clone();
    let start = merged.len();
    for p in tgt_filtered.primitives() {
        merged.push(p.clone(), Provenance::Target);
    }
    let end = merged.len();
    (merged, (start..end).collect())
}

/// Which term of the multi-view loss carries `λ`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPlacement {
    /// `λ‖Î_tgt − Ĩ_t‖ + Σ_k ‖Î_k − I_k‖`.
    #[default]
    Target,
    /// `‖Î_tgt − Ĩ_t‖ + λ Σ_k ‖Î_k − I_k‖`.
    Context,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub iterations: usize,
    pub lr: f64,
    pub lambda_mv: f64,
    pub placement: LambdaPlacement,
    pub reduction: Reduction,
    pub max_backoffs: u32,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iterations: 30,
            lr: 0.08,
            lambda_mv: 0.1,
            placement: LambdaPlacement::Target,
            reduction: Reduction::Sum,
            max_backoffs: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub trace: Vec<f64>,
    pub iterations_run: usize,
    pub backoffs: Vec<u32>,
    pub rejected_steps: usize,
    pub warnings: Vec<String>,
    pub abort_reason: Option<String>,
}

/// One image-space term of the multi-view loss.
pub struct View<'a> {
    pub camera: &'a Camera,
    pub image: &'a RgbImage,
}

/// Weighted L1 against one image.
struct ImageL1<'a> {
    image: &'a RgbImage,
    weight: f64,
}

impl PixelLoss for ImageL1<'_> {
    fn eval(
        &self,
        x: usize,
        y: usize,
        rgb: [f64; 3],
        _depth: Option<f64>,
    ) -> ([f64; 2], [f64; 3], f64) {
        let t = self.image.get(x, y);
        let mut l = 0.0;
        let mut g = [0.0; 3];
        for c in 0..3 {
            let d = rgb[c] - t[c];
            l += self.weight * d.abs();
            g[c] = if d > 0.0 {
                self.weight
            } else if d < 0.0 {
                -self.weight
            } else {
                0.0
            };
        }
        ([l, 0.0], g, 0.0)
    }
}

struct MultiView<'a> {
    views: Vec<(View<'a>, f64)>,
    render: &'a RenderConfig,
    /// Flags the refined primitives; only tiles they touch are evaluated.
    active: Vec<bool>,
}

impl MultiView<'_> {
    /// Loss over the tiles touched by refined primitives, which differs from
    /// the full loss by a constant while only their opacities change.
    fn evaluate(
        &self,
        prims: &[GaussianPrimitive],
        indices: &[usize],
        want_grad: bool,
    ) -> (f64, Option<Vec<f64>>) {
        let mut loss = 0.0;
        let mut grad = want_grad.then(|| vec![0.0; indices.len()]);
        for (v, w) in self.views.iter().filter(|(_, w)| *w != 0.0) {
            let l = ImageL1 {
                image: v.image,
                weight: *w,
            };
            let r = loss_and_gradients(
                prims,
                v.camera,
                self.render,
                &l,
                Some(&self.active),
                want_grad,
            );
            loss += r.total();
            if let (Some(grad), Some(g)) = (grad.as_mut(), r.grads) {
                for (out, &i) in grad.iter_mut().zip(indices) {
                    *out += g.opacity[i];
                }
            }
        }
        (loss, grad)
    }
}

/// Gradient descent on the opacities of `new_indices` only, against the
/// target reference and the given context views. Opacities are clamped to
/// `[0, 1]` after each step; a step that raises the loss is halved until it
/// does not.
pub fn opacity_refine(
    merged: &GaussianScene,
    new_indices: &[usize],
    target: View<'_>,
    contexts: Vec<View<'_>>,
    cfg: &RefineConfig,
    render_cfg: &RenderConfig,
) -> (GaussianScene, RefineReport) {
    let mut report = RefineReport::default();
    let mut out = merged.clone();
    if new_indices.is_empty() {
        let msg = "no new primitives to refine".to_owned();
        warn!("{msg}");
        report.warnings.push(msg);
        return (out, report);
    }
    let norm = |img: &RgbImage| match cfg.reduction {
        Reduction::Mean => 1.0 / (3 * img.len()).max(1) as f64,
        Reduction::Sum => 1.0,
    };
    let (w_tgt, w_ctx) = match cfg.placement {
        LambdaPlacement::Target => (cfg.lambda_mv, 1.0),
        LambdaPlacement::Context => (1.0, cfg.lambda_mv),
    };
    let mut views = vec![(
        View {
            camera: target.camera,
            image: target.image,
        },
        w_tgt * norm(target.image),
    )];
    for v in contexts {
        let w = w_ctx * norm(v.image);
        views.push((v, w));
    }
    let mut active = vec![false; merged.len()];
    for &i in new_indices {
        active[i] = true;
    }
    let problem = MultiView {
        views,
        render: render_cfg,
        active,
    };

    let mut prims = out.primitives().to_vec();
    let (mut loss, mut next_grad) = problem.evaluate(&prims, new_indices, true);
    report.initial_loss = loss;
    if !loss.is_finite() {
        report.abort_reason = Some(format!("initial loss is not finite: {loss}"));
        report.final_loss = loss;
        return (out, report);
    }
    for iter in 0..cfg.iterations {
        let grad = next_grad.take().expect("gradient at the current point");
        if grad.iter().any(|g| !g.is_finite()) {
            report.abort_reason = Some(format!("non-finite gradient at iteration {iter}"));
            break;
        }
        let mut halvings = 0;
        let mut step = cfg.lr;
        let moving = new_indices.iter().zip(&grad).any(|(&i, &g)| {
            let a = prims[i].opacity;
            (g > 0.0 && a > 0.0) || (g < 0.0 && a < 1.0)
        });
        let mut accepted = None;
        while moving {
            let mut probe = prims.clone();
            for (&i, &g) in new_indices.iter().zip(&grad) {
                probe[i].opacity = (prims[i].opacity - step * g).clamp(0.0, 1.0);
            }
            let (l, mut probe_grad) = problem.evaluate(&probe, new_indices, halvings == 0);
            if probe_grad.is_none() && l <= loss {
                probe_grad = problem.evaluate(&probe, new_indices, true).1;
            }
            if !l.is_finite() {
                report.abort_reason = Some(format!("non-finite loss at iteration {iter}"));
                break;
            }
            if l <= loss {
                accepted = Some((probe, l, probe_grad));
                break;
            }
            if halvings >= cfg.max_backoffs {
                report.rejected_steps += 1;
                break;
            }
            halvings += 1;
            step *= 0.5;
        }
        if report.abort_reason.is_some() {
            break;
        }
        match accepted {
            Some((probe, l, g_new)) => {
                prims = probe;
                loss = l;
                next_grad = g_new;
            }
            None => next_grad = Some(grad),
        }
        report.backoffs.push(halvings);
        report.trace.push(loss);
        report.iterations_run += 1;
    }
    report.final_loss = loss;
    for (dst, src) in out.primitives_mut().iter_mut().zip(&prims) {
        dst.opacity = src.opacity;
    }
    (out, report)
}
