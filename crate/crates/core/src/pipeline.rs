//! End-to-end completion: anchor selection, target supply, depth alignment,
//! ray-constrained registration, hole-aware merging and opacity refinement.
//!
//! Also hosts the synthetic-input setup, the ablation grid and the
//! long-sequence harness used by the CLI and the acceptance suite.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchor::{
    nearest_views, select_nearest_view, select_stereo_anchor, AnchorDecision, AnchorError,
    DEFAULT_GATE_DEG,
};
use crate::camera::Camera;
use crate::config::{parse_list, parse_value, ConfigError, KeyValues};
use crate::depth_align::{
    apply_affine_depth, correspondence_mask, fit_affine_depth_ransac, AffineDepthFit, RansacConfig,
};
use crate::image_io;
use crate::integrator::{
    filter_by_hole_mask, merge_scenes, opacity_refine, HoleMask, LambdaPlacement, RefineConfig,
    RefineReport, View,
};
use crate::metrics::{
    geometry_metrics, image_metrics, psnr_for_report, GeometryMetrics, ImageMetrics,
};
use crate::oracle::{
    build_context, generate_synthetic_scene, make_reference_image, predict_target, ContextSpec,
    CorruptionSpec, Degradation, LiftSpec, OracleScene, Preset, SceneSpec,
};
use crate::plane::{DepthMap, Mask, RgbImage};
use crate::ply::save_scene_ply;
use crate::ray_register::{
    parameterize_rays, ray_constrained_optimize, DepthSampling, Optimizer, Reduction,
    RegisterConfig, RegistrationRefs, RegistrationReport,
};
use crate::render::{render, RenderBuffers, RenderConfig};
use crate::scene::{GaussianScene, LossWeights};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Setup,
    AnchorSelection,
    ReferenceSupply,
    TargetSupply,
    DepthAlignment,
    RayRegister,
    Integration,
    MultiViewRefine,
    Output,
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage:?} failed: {message}")]
pub struct PipelineError {
    pub stage: Stage,
    pub message: String,
}

impl PipelineError {
    fn new(stage: Stage, message: impl std::fmt::Display) -> Self {
        Self {
            stage,
            message: message.to_string(),
        }
    }
}

/// Which stages run. Disabling SA falls back to the nearest context view;
/// disabling DA uses the identity fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageToggles {
    pub sa: bool,
    pub da: bool,
    pub rc: bool,
    pub mv: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            sa: true,
            da: true,
            rc: true,
            mv: true,
        }
    }
}

impl StageToggles {
    /// Parses a comma list such as `sa,da,rc,mv`; `none` disables all.
    pub fn parse(list: &str) -> Result<Self, String> {
        let mut t = Self {
            sa: false,
            da: false,
            rc: false,
            mv: false,
        };
        if list.trim() == "none" {
            return Ok(t);
        }
        for item in list.split(',').map(str::trim) {
            match item {
                "sa" => t.sa = true,
                "da" => t.da = true,
                "rc" => t.rc = true,
                "mv" => t.mv = true,
                other => return Err(format!("unknown stage '{other}'")),
            }
        }
        Ok(t)
    }

    pub fn label(&self) -> String {
        let on: Vec<&str> = [
            (self.sa, "sa"),
            (self.da, "da"),
            (self.rc, "rc"),
            (self.mv, "mv"),
        ]
        .into_iter()
        .filter_map(|(b, n)| b.then_some(n))
        .collect();
        if on.is_empty() {
            "none".into()
        } else {
            on.join(",")
        }
    }
}

/// Where the affine depth fit is computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentView {
    #[default]
    Anchor,
    /// Fit directly at the target pose over its non-hole pixels.
    Target,
}

/// Synthetic scene, protocol and simulated priors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub scene: SceneSpec,
    pub context: ContextSpec,
    pub context_frames: Vec<usize>,
    pub target_frame: usize,
    pub corruption: CorruptionSpec,
    pub lift: LiftSpec,
    pub degradation: Degradation,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            scene: SceneSpec::new(Preset::Room, 20_000, 0),
            context: ContextSpec::default(),
            context_frames: vec![0, 3],
            target_frame: 6,
            corruption: CorruptionSpec::default(),
            lift: LiftSpec::default(),
            degradation: Degradation::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub stages: StageToggles,
    pub alignment_view: AlignmentView,
    pub anchor_gate_deg: f64,
    pub ransac: RansacConfig,
    pub register: RegisterConfig,
    pub refine: RefineConfig,
    pub weights: LossWeights,
    pub depth_sampling: DepthSampling,
    /// Context views used by the multi-view refinement.
    pub n_context_views: usize,
    /// F-score distance; `None` uses 5% of the context's bounding diagonal.
    pub f_score_threshold: Option<f64>,
    pub render: RenderConfig,
    pub oracle: OracleConfig,
    /// Steps and frame interval of the long-sequence harness.
    pub long_run_steps: usize,
    pub long_run_interval: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stages: StageToggles::default(),
            alignment_view: AlignmentView::Anchor,
            anchor_gate_deg: DEFAULT_GATE_DEG,
            ransac: RansacConfig::default(),
            register: RegisterConfig::default(),
            refine: RefineConfig::default(),
            weights: LossWeights::default(),
            depth_sampling: DepthSampling::Nearest,
            n_context_views: 2,
            f_score_threshold: None,
            render: RenderConfig::default(),
            oracle: OracleConfig::default(),
            long_run_steps: 5,
            long_run_interval: 3,
        }
    }
}

fn parse_enum<T>(key: &str, value: &str, table: &[(&str, T)]) -> Result<T, ConfigError>
where
    T: Copy,
{
    table
        .iter()
        .find(|(n, _)| *n == value)
        .map(|(_, v)| *v)
        .ok_or_else(|| ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
            reason: format!(
                "expected one of {}",
                table.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(", ")
            ),
        })
}

impl PipelineConfig {
    /// Every key accepted by [`PipelineConfig::apply`].
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "stages",
        "alignment_view",
        "anchor_gate_deg",
        "ransac_iters",
        "ransac_thresh_frac",
        "ransac_min_inlier_frac",
        "reg_iters",
        "reg_lr",
        "reg_optimizer",
        "reg_reduction",
        "reg_max_backoffs",
        "depth_sampling",
        "lambda_d",
        "lambda_s",
        "lambda_c",
        "lambda_mv",
        "lambda_placement",
        "tau",
        "refine_iters",
        "refine_lr",
        "refine_reduction",
        "n_context_views",
        "f_score_threshold",
        "near",
        "low_pass",
        "tile_size",
        "preset",
        "gt_primitives",
        "frames",
        "width",
        "height",
        "fov_deg",
        "frame_step",
        "frame_yaw_deg",
        "context_primitives",
        "context_depth_noise",
        "context_frames",
        "target_frame",
        "affine_scale",
        "affine_shift",
        "ray_noise_sigma",
        "outlier_fraction",
        "distortion",
        "reference_baseline",
        "lift_stride",
        "lift_footprint",
        "lift_opacity",
        "blur_sigma_px",
        "noise_amplitude",
        "long_run_steps",
        "long_run_interval",
    ];

    /// Sets one key. Unknown keys are rejected.
    pub fn apply(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let o = &mut self.oracle;
        match key {
            "seed" => self.seed = parse_value(key, v)?,
            "stages" => {
                self.stages = StageToggles::parse(v).map_err(|reason| ConfigError::BadValue {
                    key: key.into(),
                    value: v.into(),
                    reason,
                })?
            }
            "alignment_view" => {
                self.alignment_view = parse_enum(
                    key,
                    v,
                    &[
                        ("anchor", AlignmentView::Anchor),
                        ("target", AlignmentView::Target),
                    ],
                )?
            }
            "anchor_gate_deg" => self.anchor_gate_deg = parse_value(key, v)?,
            "ransac_iters" => self.ransac.iterations = parse_value(key, v)?,
            "ransac_thresh_frac" => self.ransac.threshold_frac = parse_value(key, v)?,
            "ransac_min_inlier_frac" => self.ransac.min_inlier_fraction = parse_value(key, v)?,
            "reg_iters" => self.register.iterations = parse_value(key, v)?,
            "reg_lr" => self.register.lr = parse_value(key, v)?,
            "reg_optimizer" => {
                self.register.optimizer = parse_enum(
                    key,
                    v,
                    &[
                        ("gd", Optimizer::GradientDescent),
                        ("adam", Optimizer::adam()),
                    ],
                )?
            }
            "reg_reduction" => {
                self.register.reduction = parse_enum(
                    key,
                    v,
                    &[("sum", Reduction::Sum), ("mean", Reduction::Mean)],
                )?
            }
            "reg_max_backoffs" => self.register.max_backoffs = parse_value(key, v)?,
            "depth_sampling" => {
                self.depth_sampling = parse_enum(
                    key,
                    v,
                    &[
                        ("nearest", DepthSampling::Nearest),
                        ("bilinear", DepthSampling::Bilinear),
                    ],
                )?
            }
            "lambda_d" => self.weights.lambda_d = parse_value(key, v)?,
            "lambda_s" => self.weights.lambda_s = parse_value(key, v)?,
            "lambda_c" => self.weights.lambda_c = parse_value(key, v)?,
            "lambda_mv" => self.weights.lambda_mv = parse_value(key, v)?,
            "lambda_placement" => {
                self.refine.placement = parse_enum(
                    key,
                    v,
                    &[
                        ("target", LambdaPlacement::Target),
                        ("context", LambdaPlacement::Context),
                    ],
                )?
            }
            "tau" => self.weights.tau = parse_value(key, v)?,
            "refine_iters" => self.refine.iterations = parse_value(key, v)?,
            "refine_lr" => self.refine.lr = parse_value(key, v)?,
            "refine_reduction" => {
                self.refine.reduction = parse_enum(
                    key,
                    v,
                    &[("sum", Reduction::Sum), ("mean", Reduction::Mean)],
                )?
            }
            "n_context_views" => self.n_context_views = parse_value(key, v)?,
            "f_score_threshold" => self.f_score_threshold = Some(parse_value(key, v)?),
            "near" => {
                let near = parse_value(key, v)?;
                self.render.near = near;
                self.register.near = near;
            }
            "low_pass" => self.render.low_pass = parse_value(key, v)?,
            "tile_size" => self.render.tile_size = parse_value(key, v)?,
            "preset" => {
                o.scene.preset = v.parse().map_err(|reason| ConfigError::BadValue {
                    key: key.into(),
                    value: v.into(),
                    reason,
                })?
            }
            "gt_primitives" => o.scene.n_primitives = parse_value(key, v)?,
            "frames" => o.scene.n_frames = parse_value(key, v)?,
            "width" => o.scene.width = parse_value(key, v)?,
            "height" => o.scene.height = parse_value(key, v)?,
            "fov_deg" => o.scene.fov_deg = parse_value(key, v)?,
            "frame_step" => o.scene.frame_step = parse_value(key, v)?,
            "frame_yaw_deg" => o.scene.frame_yaw_deg = parse_value(key, v)?,
            "context_primitives" => o.context.n_primitives = parse_value(key, v)?,
            "context_depth_noise" => o.context.depth_noise = parse_value(key, v)?,
            "context_frames" => o.context_frames = parse_list(key, v)?,
            "target_frame" => o.target_frame = parse_value(key, v)?,
            "affine_scale" => o.corruption.affine_scale = parse_value(key, v)?,
            "affine_shift" => o.corruption.affine_shift = parse_value(key, v)?,
            "ray_noise_sigma" => o.corruption.ray_noise_sigma = parse_value(key, v)?,
            "outlier_fraction" => o.corruption.outlier_fraction = parse_value(key, v)?,
            "distortion" => o.corruption.distortion = parse_value(key, v)?,
            "reference_baseline" => o.corruption.reference_baseline = parse_value(key, v)?,
            "lift_stride" => o.lift.stride = parse_value(key, v)?,
            "lift_footprint" => o.lift.footprint = parse_value(key, v)?,
            "lift_opacity" => o.lift.opacity = parse_value(key, v)?,
            "blur_sigma_px" => o.degradation.blur_sigma_px = parse_value(key, v)?,
            "noise_amplitude" => o.degradation.noise_amplitude = parse_value(key, v)?,
            "long_run_steps" => self.long_run_steps = parse_value(key, v)?,
            "long_run_interval" => self.long_run_interval = parse_value(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Defaults overridden by the entries of `kv`, then validated.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (k, v) in kv.iter() {
            cfg.apply(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::from_key_values(&KeyValues::parse(text)?)
    }

    /// Rejects values no stage can work with.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, value: String, reason: &str| ConfigError::BadValue {
            key: key.into(),
            value,
            reason: reason.into(),
        };
        let o = &self.oracle;
        let c = &o.corruption;
        if !(c.affine_scale > 0.0 && c.affine_scale.is_finite()) {
            return Err(bad(
                "affine_scale",
                c.affine_scale.to_string(),
                "must be positive",
            ));
        }
        for (k, x) in [
            ("outlier_fraction", c.outlier_fraction),
            ("ransac_min_inlier_frac", self.ransac.min_inlier_fraction),
            ("tau", self.weights.tau),
        ] {
            if !(0.0..=1.0).contains(&x) {
                return Err(bad(k, x.to_string(), "must lie in [0, 1]"));
            }
        }
        if !(c.ray_noise_sigma >= 0.0 && c.distortion >= 0.0) {
            return Err(bad(
                "ray_noise_sigma",
                c.ray_noise_sigma.to_string(),
                "noise terms must be non-negative",
            ));
        }
        for (k, x) in [
            ("reg_lr", self.register.lr),
            ("refine_lr", self.refine.lr),
            ("near", self.render.near),
        ] {
            if !(x > 0.0 && x.is_finite()) {
                return Err(bad(k, x.to_string(), "must be positive"));
            }
        }
        if o.scene.n_primitives == 0
            || o.scene.width == 0
            || o.scene.height == 0
            || self.render.tile_size == 0
        {
            return Err(bad(
                "gt_primitives",
                o.scene.n_primitives.to_string(),
                "sizes must be positive",
            ));
        }
        if !(o.scene.fov_deg > 1.0 && o.scene.fov_deg < 170.0) {
            return Err(bad(
                "fov_deg",
                o.scene.fov_deg.to_string(),
                "must lie in (1, 170)",
            ));
        }
        if o.context_frames.is_empty() {
            return Err(bad(
                "context_frames",
                String::new(),
                "at least one context frame is required",
            ));
        }
        let last = self.last_frame_needed();
        if last >= o.scene.n_frames {
            return Err(bad(
                "frames",
                o.scene.n_frames.to_string(),
                "trajectory too short for the requested frames",
            ));
        }
        if o.lift.stride == 0 {
            return Err(bad("lift_stride", "0".into(), "must be positive"));
        }
        Ok(())
    }

    fn last_frame_needed(&self) -> usize {
        let o = &self.oracle;
        let ctx = o.context_frames.iter().copied().max().unwrap_or(0);
        ctx.max(o.target_frame)
    }

    /// Frames visited by the long-sequence harness.
    pub fn long_run_targets(&self, steps: usize, interval: usize) -> Vec<usize> {
        (0..steps)
            .map(|j| self.oracle.target_frame + j * interval)
            .collect()
    }

    /// Renders the configuration back into the key-value format.
    pub fn to_key_values(&self) -> String {
        let o = &self.oracle;
        let name = |b: bool, t: &'static str, f: &'static str| if b { t } else { f };
        let mut lines = vec![
            format!("seed = {}", self.seed),
            format!("stages = {}", self.stages.label()),
            format!(
                "alignment_view = {}",
                name(
                    self.alignment_view == AlignmentView::Anchor,
                    "anchor",
                    "target"
                )
            ),
            format!("anchor_gate_deg = {}", self.anchor_gate_deg),
            format!("ransac_iters = {}", self.ransac.iterations),
            format!("ransac_thresh_frac = {}", self.ransac.threshold_frac),
            format!(
                "ransac_min_inlier_frac = {}",
                self.ransac.min_inlier_fraction
            ),
            format!("reg_iters = {}", self.register.iterations),
            format!("reg_lr = {}", self.register.lr),
            format!(
                "reg_optimizer = {}",
                name(
                    self.register.optimizer == Optimizer::GradientDescent,
                    "gd",
                    "adam"
                )
            ),
            format!(
                "reg_reduction = {}",
                name(self.register.reduction == Reduction::Sum, "sum", "mean")
            ),
            format!("reg_max_backoffs = {}", self.register.max_backoffs),
            format!(
                "depth_sampling = {}",
                name(
                    self.depth_sampling == DepthSampling::Nearest,
                    "nearest",
                    "bilinear"
                )
            ),
            format!("lambda_d = {}", self.weights.lambda_d),
            format!("lambda_s = {}", self.weights.lambda_s),
            format!("lambda_c = {}", self.weights.lambda_c),
            format!("lambda_mv = {}", self.weights.lambda_mv),
            format!(
                "lambda_placement = {}",
                name(
                    self.refine.placement == LambdaPlacement::Target,
                    "target",
                    "context"
                )
            ),
            format!("tau = {}", self.weights.tau),
            format!("refine_iters = {}", self.refine.iterations),
            format!("refine_lr = {}", self.refine.lr),
            format!(
                "refine_reduction = {}",
                name(self.refine.reduction == Reduction::Sum, "sum", "mean")
            ),
            format!("n_context_views = {}", self.n_context_views),
        ];
        if let Some(f) = self.f_score_threshold {
            lines.push(format!("f_score_threshold = {f}"));
        }
        lines.extend([
            format!("near = {}", self.render.near),
            format!("low_pass = {}", self.render.low_pass),
            format!("tile_size = {}", self.render.tile_size),
            format!(
                "preset = {}",
                name(o.scene.preset == Preset::Room, "room", "terrain")
            ),
            format!("gt_primitives = {}", o.scene.n_primitives),
            format!("frames = {}", o.scene.n_frames),
            format!("width = {}", o.scene.width),
            format!("height = {}", o.scene.height),
            format!("fov_deg = {}", o.scene.fov_deg),
            format!("frame_step = {}", o.scene.frame_step),
            format!("frame_yaw_deg = {}", o.scene.frame_yaw_deg),
            format!("context_primitives = {}", o.context.n_primitives),
            format!("context_depth_noise = {}", o.context.depth_noise),
            format!(
                "context_frames = {}",
                o.context_frames
                    .iter()
                    .map(|f| f.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            ),
            format!("target_frame = {}", o.target_frame),
            format!("affine_scale = {}", o.corruption.affine_scale),
            format!("affine_shift = {}", o.corruption.affine_shift),
            format!("ray_noise_sigma = {}", o.corruption.ray_noise_sigma),
            format!("outlier_fraction = {}", o.corruption.outlier_fraction),
            format!("distortion = {}", o.corruption.distortion),
            format!("reference_baseline = {}", o.corruption.reference_baseline),
            format!("lift_stride = {}", o.lift.stride),
            format!("lift_footprint = {}", o.lift.footprint),
            format!("lift_opacity = {}", o.lift.opacity),
            format!("blur_sigma_px = {}", o.degradation.blur_sigma_px),
            format!("noise_amplitude = {}", o.degradation.noise_amplitude),
            format!("long_run_steps = {}", self.long_run_steps),
            format!("long_run_interval = {}", self.long_run_interval),
        ]);
        lines.join("\n") + "\n"
    }
}

/// One observed context view: pose and image.
#[derive(Clone, Debug)]
pub struct ContextView {
    pub camera: Camera,
    pub image: RgbImage,
}

/// Target Gaussians and depth predicted for a target/anchor pair.
#[derive(Clone, Debug)]
pub struct Lifted {
    pub gaussians: GaussianScene,
    /// Predicted planar depth at the target pose, NaN where unknown.
    pub depth_target: DepthMap,
    /// Predicted planar depth at the anchor pose.
    pub depth_anchor: DepthMap,
    /// Ground-truth position per lifted Gaussian, when known.
    pub gt_points: Option<Vec<Vector3<f64>>>,
}

/// Supplier of the generated reference image and the lifted target
/// Gaussians; stands in for the image generator and the feed-forward model.
pub trait TargetSupply: Sync {
    fn reference_image(&self, target: &Camera, anchor: &Camera) -> Result<RgbImage, String>;
    fn lift(
        &self,
        target: &Camera,
        anchor: &Camera,
        reference: &RgbImage,
    ) -> Result<Lifted, String>;
}

/// Synthetic supply driven by a ground-truth scene.
pub struct OracleSupply<'a> {
    pub gt_scene: &'a GaussianScene,
    pub corruption: CorruptionSpec,
    pub lift: LiftSpec,
    pub degradation: Degradation,
    pub render: RenderConfig,
    /// Decorrelates noise across steps of a long run.
    pub stream: u64,
}

impl TargetSupply for OracleSupply<'_> {
    fn reference_image(&self, target: &Camera, _anchor: &Camera) -> Result<RgbImage, String> {
        Ok(make_reference_image(
            self.gt_scene,
            target,
            &self.degradation,
            &self.render,
        ))
    }

    fn lift(
        &self,
        target: &Camera,
        anchor: &Camera,
        reference: &RgbImage,
    ) -> Result<Lifted, String> {
        let truth = render(self.gt_scene, target, &self.render);
        let anchor_truth = render(self.gt_scene, anchor, &self.render);
        let p = predict_target(
            target,
            &truth,
            reference,
            anchor,
            &anchor_truth.depth,
            &self.corruption,
            &self.lift,
            self.stream,
        );
        if p.gaussians.is_empty() {
            return Err("target view has no renderable surface".into());
        }
        Ok(Lifted {
            gaussians: p.gaussians,
            depth_target: p.depth_target,
            depth_anchor: p.depth_anchor,
            gt_points: Some(p.gt_points),
        })
    }
}

/// Stereo anchor for `target`, or the nearest view when anchor selection
/// is disabled.
pub fn choose_anchor(
    target: &Camera,
    contexts: &[Camera],
    cfg: &PipelineConfig,
) -> Result<AnchorDecision, AnchorError> {
    if cfg.stages.sa {
        select_stereo_anchor(target, contexts, cfg.anchor_gate_deg)
    } else {
        select_nearest_view(target, contexts)
    }
}

/// Supply read from disk. The predicted anchor depth belongs to one anchor
/// view; when `anchor` is set, lifting for any other view is an error.
pub struct PrecomputedSupply {
    pub reference: RgbImage,
    pub lifted: Lifted,
    pub anchor: Option<Camera>,
}

impl TargetSupply for PrecomputedSupply {
    fn reference_image(&self, _target: &Camera, _anchor: &Camera) -> Result<RgbImage, String> {
        Ok(self.reference.clone())
    }

    fn lift(
        &self,
        _target: &Camera,
        anchor: &Camera,
        _reference: &RgbImage,
    ) -> Result<Lifted, String> {
        match &self.anchor {
            Some(a) if a != anchor => {
                Err("the stored prediction was made for a different anchor view".into())
            }
            _ => Ok(self.lifted.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub seconds: f64,
    pub skipped: bool,
}

/// Wall time per stage. `total` is the sum of the stages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub reference_supply: StageTime,
    pub target_supply: StageTime,
    pub depth_alignment: StageTime,
    pub ray_register: StageTime,
    pub multi_view_refine: StageTime,
    pub total: f64,
}

impl TimingReport {
    pub fn stages(&self) -> [(&'static str, StageTime); 5] {
        [
            ("reference-image supply", self.reference_supply),
            ("target-gaussian supply", self.target_supply),
            ("depth alignment", self.depth_alignment),
            ("ray-constrained register", self.ray_register),
            ("multi-view refinement", self.multi_view_refine),
        ]
    }

    pub fn finalize(&mut self) {
        self.total = self.stages().iter().map(|(_, s)| s.seconds).sum();
    }

    pub fn table(&self) -> String {
        let mut out = String::from("stage                        seconds\n");
        for (name, s) in self.stages() {
            if s.skipped {
                out.push_str(&format!("{name:<28} {:>8}\n", "skipped"));
            } else {
                out.push_str(&format!("{name:<28} {:>8.3}\n", s.seconds));
            }
        }
        out.push_str(&format!("{:<28} {:>8.3}\n", "total", self.total));
        out
    }
}

/// Mean |d − d*| over the registered target primitives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RayErrors {
    pub before_register: f64,
    pub after_register: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Context alone at the target pose (holes render as background).
    pub target_before: Option<ImageMetrics>,
    /// Merged scene before opacity refinement.
    pub target_merged: Option<ImageMetrics>,
    pub target_final: Option<ImageMetrics>,
    /// Mean over the context views.
    pub context_before: Option<ImageMetrics>,
    pub context_merged: Option<ImageMetrics>,
    pub context_final: Option<ImageMetrics>,
    /// Raw lifted prediction against ground truth.
    pub geometry_initial: Option<GeometryMetrics>,
    /// After ray initialization at the aligned depth.
    pub geometry_aligned: Option<GeometryMetrics>,
    /// All registered target primitives.
    pub geometry_registered: Option<GeometryMetrics>,
    /// Only the primitives that fill context holes.
    pub geometry_filled: Option<GeometryMetrics>,
    pub ray_errors: Option<RayErrors>,
}

/// Everything a completion run reports; byte-stable for a fixed seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompletionReport {
    pub stages: StageToggles,
    pub alignment_view: AlignmentView,
    pub anchor: AnchorDecision,
    pub alignment: AffineDepthFit,
    pub registration: Option<RegistrationReport>,
    pub refinement: Option<RefineReport>,
    pub hole_fraction: f64,
    pub n_context: usize,
    pub n_lifted: usize,
    pub n_registered: usize,
    pub n_filled: usize,
    pub f_score_threshold: f64,
    pub metrics: MetricReport,
}

/// Intermediate products kept for inspection and artifact export.
#[derive(Clone, Debug, Default)]
pub struct Artifacts {
    pub reference: Option<RgbImage>,
    pub context_at_target: Option<RenderBuffers>,
    pub context_at_anchor: Option<RenderBuffers>,
    pub hole_mask: Option<Mask>,
    pub aligned_target_depth: Option<DepthMap>,
    /// Target Gaussians on their rays before registration.
    pub aligned: Option<GaussianScene>,
    pub registered: Option<GaussianScene>,
    pub merged: Option<GaussianScene>,
    pub final_render: Option<RenderBuffers>,
}

#[derive(Clone, Debug)]
pub struct CompletionOutput {
    pub scene: GaussianScene,
    /// Indices of the new primitives in `scene`.
    pub new_indices: Vec<usize>,
    pub report: CompletionReport,
    pub timing: TimingReport,
    pub artifacts: Artifacts,
}

/// Inputs of a completion step.
pub struct CompletionInputs<'a> {
    pub context: &'a GaussianScene,
    pub views: &'a [ContextView],
    pub target: &'a Camera,
}

fn mean_image_metrics(items: &[ImageMetrics]) -> Option<ImageMetrics> {
    if items.is_empty() {
        return None;
    }
    let n = items.len() as f64;
    Some(ImageMetrics {
        psnr: items.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: items.iter().map(|m| m.ssim).sum::<f64>() / n,
    })
}

fn report_metrics(m: ImageMetrics) -> ImageMetrics {
    ImageMetrics {
        psnr: psnr_for_report(m.psnr),
        ssim: m.ssim,
    }
}

fn view_metrics(
    scene: &GaussianScene,
    views: &[ContextView],
    cfg: &RenderConfig,
) -> Option<ImageMetrics> {
    let per: Vec<ImageMetrics> = views
        .iter()
        .filter_map(|v| {
            image_metrics(&render(scene, &v.camera, cfg).rgb, &v.image)
                .ok()
                .map(report_metrics)
        })
        .collect();
    mean_image_metrics(&per)
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let out = f();
    (out, t.elapsed().as_secs_f64())
}

/// Runs one completion step. `out_dir`, when given, receives the artifacts;
/// on failure whatever was produced so far is flushed before returning.
pub fn run_completion_pipeline(
    inputs: &CompletionInputs<'_>,
    supply: &dyn TargetSupply,
    cfg: &PipelineConfig,
    out_dir: Option<&Path>,
) -> Result<CompletionOutput, PipelineError> {
    let mut artifacts = Artifacts::default();
    let result = run_stages(inputs, supply, cfg, &mut artifacts);
    if let Some(dir) = out_dir {
        match &result {
            Ok(out) => write_outputs(dir, out).map_err(|e| PipelineError::new(Stage::Output, e))?,
            Err(_) => {
                // Best effort; the stage error is what the caller needs.
                let _ = write_artifacts(dir, &artifacts);
            }
        }
    }
    result
}

fn run_stages(
    inputs: &CompletionInputs<'_>,
    supply: &dyn TargetSupply,
    cfg: &PipelineConfig,
    artifacts: &mut Artifacts,
) -> Result<CompletionOutput, PipelineError> {
    let rcfg = &cfg.render;
    let tau = cfg.weights.tau;
    let target = inputs.target;
    let cams: Vec<Camera> = inputs.views.iter().map(|v| v.camera.clone()).collect();
    let mut timing = TimingReport::default();

    // Anchor selection and reference image.
    let (selected, secs) = timed(|| -> Result<_, PipelineError> {
        let anchor = choose_anchor(target, &cams, cfg)
            .map_err(|e| PipelineError::new(Stage::AnchorSelection, e))?;
        let reference = supply
            .reference_image(target, &cams[anchor.anchor_index])
            .map_err(|e| PipelineError::new(Stage::ReferenceSupply, e))?;
        Ok((anchor, reference))
    });
    let (anchor, reference) = selected?;
    timing.reference_supply.seconds = secs;
    if reference.width() != target.width() as usize
        || reference.height() != target.height() as usize
    {
        return Err(PipelineError::new(
            Stage::ReferenceSupply,
            "reference image does not match the target resolution",
        ));
    }
    artifacts.reference = Some(reference.clone());
    let anchor_cam = &cams[anchor.anchor_index];
    info!(
        "anchor view {} (rotation {:.1} deg, baseline {:.3}, fallback {})",
        anchor.anchor_index, anchor.relative_rotation_deg, anchor.baseline, anchor.fallback_used
    );

    let (lifted, secs) = timed(|| supply.lift(target, anchor_cam, &reference));
    timing.target_supply.seconds = secs;
    let lifted = lifted.map_err(|e| PipelineError::new(Stage::TargetSupply, e))?;
    if let Some(gt) = &lifted.gt_points {
        if gt.len() != lifted.gaussians.len() {
            return Err(PipelineError::new(
                Stage::TargetSupply,
                "ground-truth points do not match lifted Gaussians",
            ));
        }
    }

    // Context renders, affine fit and ray initialization.
    let (aligned, secs) = timed(|| -> Result<_, PipelineError> {
        let ctx_tgt = render(inputs.context, target, rcfg);
        let ctx_anc = render(inputs.context, anchor_cam, rcfg);
        let fit = if cfg.stages.da {
            let (pred, ctx) = match cfg.alignment_view {
                AlignmentView::Anchor => (&lifted.depth_anchor, &ctx_anc),
                AlignmentView::Target => (&lifted.depth_target, &ctx_tgt),
            };
            if !pred.same_shape(&ctx.depth) {
                return Err(PipelineError::new(
                    Stage::DepthAlignment,
                    "predicted depth does not match the view resolution",
                ));
            }
            let valid = correspondence_mask(pred, &ctx.depth, &ctx.alpha, tau);
            let rcfg = RansacConfig {
                seed: cfg.ransac.seed ^ cfg.seed,
                ..cfg.ransac.clone()
            };
            fit_affine_depth_ransac(pred, &ctx.depth, &valid, &rcfg)
                .map_err(|e| PipelineError::new(Stage::DepthAlignment, e))?
        } else {
            AffineDepthFit::identity()
        };
        let aligned_depth = apply_affine_depth(&lifted.depth_target, &fit);
        let init = parameterize_rays(
            &lifted.gaussians,
            target,
            &aligned_depth,
            cfg.depth_sampling,
            cfg.register.near,
        )
        .map_err(|e| PipelineError::new(Stage::DepthAlignment, e))?;
        Ok((ctx_tgt, ctx_anc, fit, aligned_depth, init))
    });
    timing.depth_alignment.seconds = secs;
    timing.depth_alignment.skipped = !cfg.stages.da;
    let (ctx_tgt, ctx_anc, fit, aligned_depth, mut init) = aligned?;
    if init.scene.is_empty() {
        return Err(PipelineError::new(
            Stage::DepthAlignment,
            "no target primitive projects into the target view",
        ));
    }
    // Keep each primitive's angular footprint as it slides along its ray.
    for (k, p) in init.scene.primitives_mut().iter_mut().enumerate() {
        let before = (lifted.gaussians.primitives()[init.kept[k]].mean - init.rays.origin).norm();
        let ratio = init.rays.distances[k] / before;
        if ratio.is_finite() && ratio > 0.0 {
            p.scale *= ratio;
        }
    }
    info!(
        "alignment s = {:.4}, t = {:.4}, {} of {} lifted primitives on rays",
        fit.scale,
        fit.shift,
        init.scene.len(),
        lifted.gaussians.len()
    );
    artifacts.context_at_target = Some(ctx_tgt.clone());
    artifacts.context_at_anchor = Some(ctx_anc.clone());
    artifacts.aligned_target_depth = Some(aligned_depth);

    let gt_points: Option<Vec<Vector3<f64>>> = lifted
        .gt_points
        .as_ref()
        .map(|g| init.kept.iter().map(|&i| g[i]).collect());
    let aligned_scene = init.scene.clone();
    artifacts.aligned = Some(aligned_scene.clone());
    let aligned_distances = init.rays.distances.clone();

    // Ray-constrained registration.
    let target_valid = ctx_tgt.alpha.map(|&a| a >= tau);
    let target_valid = Mask::from_fn(target_valid.width(), target_valid.height(), |x, y| {
        *target_valid.get(x, y) && ctx_tgt.depth.get(x, y).is_finite()
    });
    let anchor_valid = Mask::from_fn(ctx_anc.width(), ctx_anc.height(), |x, y| {
        *ctx_anc.alpha.get(x, y) >= tau && ctx_anc.depth.get(x, y).is_finite()
    });
    let (registered, registration) = if cfg.stages.rc {
        let refs = RegistrationRefs {
            reference: &reference,
            target_depth: &ctx_tgt.depth,
            target_valid: &target_valid,
            anchor_depth: &ctx_anc.depth,
            anchor_valid: &anchor_valid,
        };
        let (res, secs) = timed(|| {
            ray_constrained_optimize(
                inputs.context,
                &init.scene,
                &init.rays,
                target,
                anchor_cam,
                &refs,
                &cfg.weights,
                &cfg.register,
                rcfg,
            )
        });
        timing.ray_register.seconds = secs;
        let (scene, rays, report) = res.map_err(|e| PipelineError::new(Stage::RayRegister, e))?;
        init.rays = rays;
        (scene, Some(report))
    } else {
        timing.ray_register.skipped = true;
        (init.scene.clone(), None)
    };
    artifacts.registered = Some(registered.clone());

    // Hole-aware filtering, merge and opacity refinement.
    let ((merged, new_indices, filled_idx, hole, refined), secs) = timed(|| {
        let hole = HoleMask {
            mask: ctx_tgt.alpha.map(|&a| a < tau),
            tau,
        };
        let (filtered, filled_idx) =
            filter_by_hole_mask(&registered, &hole, target, cfg.register.near);
        let (merged, new_indices) = merge_scenes(inputs.context, &filtered);
        let refined = if cfg.stages.mv {
            let nearest = nearest_views(target, &cams, cfg.n_context_views);
            let contexts: Vec<View<'_>> = nearest
                .iter()
                .map(|&i| View {
                    camera: &inputs.views[i].camera,
                    image: &inputs.views[i].image,
                })
                .collect();
            let rc = RefineConfig {
                lambda_mv: cfg.weights.lambda_mv,
                ..cfg.refine.clone()
            };
            Some(opacity_refine(
                &merged,
                &new_indices,
                View {
                    camera: target,
                    image: &reference,
                },
                contexts,
                &rc,
                rcfg,
            ))
        } else {
            None
        };
        (merged, new_indices, filled_idx, hole, refined)
    });
    timing.multi_view_refine.seconds = secs;
    timing.multi_view_refine.skipped = !cfg.stages.mv;
    timing.finalize();
    artifacts.hole_mask = Some(hole.mask.clone());
    artifacts.merged = Some(merged.clone());
    let (scene, refinement) = match refined {
        Some((s, r)) => (s, Some(r)),
        None => (merged.clone(), None),
    };

    // Metrics.
    let final_render = render(&scene, target, rcfg);
    let mut metrics = MetricReport {
        target_before: image_metrics(&ctx_tgt.rgb, &reference)
            .ok()
            .map(report_metrics),
        target_merged: image_metrics(&render(&merged, target, rcfg).rgb, &reference)
            .ok()
            .map(report_metrics),
        target_final: image_metrics(&final_render.rgb, &reference)
            .ok()
            .map(report_metrics),
        context_before: view_metrics(inputs.context, inputs.views, rcfg),
        context_merged: if cfg.stages.mv {
            view_metrics(&merged, inputs.views, rcfg)
        } else {
            None
        },
        context_final: view_metrics(&scene, inputs.views, rcfg),
        ..Default::default()
    };
    if metrics.context_merged.is_none() {
        metrics.context_merged = metrics.context_final;
    }
    let f_thresh = cfg
        .f_score_threshold
        .unwrap_or_else(|| crate::metrics::default_f_threshold(&inputs.context.means()).max(1e-9));
    if let Some(gt) = &gt_points {
        let gt_dist: Vec<f64> = gt.iter().map(|p| (p - init.rays.origin).norm()).collect();
        let initial: Vec<Vector3<f64>> = init
            .kept
            .iter()
            .map(|&i| lifted.gaussians.primitives()[i].mean)
            .collect();
        let initial_d: Vec<f64> = initial
            .iter()
            .map(|p| (p - init.rays.origin).norm())
            .collect();
        let geo = |pts: &[Vector3<f64>], d: &[f64], gt_pts: &[Vector3<f64>], gt_d: &[f64]| {
            geometry_metrics(pts, gt_pts, f_thresh, Some((d, gt_d))).ok()
        };
        metrics.geometry_initial = geo(&initial, &initial_d, gt, &gt_dist);
        metrics.geometry_aligned = geo(&aligned_scene.means(), &aligned_distances, gt, &gt_dist);
        metrics.geometry_registered = geo(&registered.means(), &init.rays.distances, gt, &gt_dist);
        if !filled_idx.is_empty() {
            let pick = |v: &[f64]| filled_idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let gt_f: Vec<Vector3<f64>> = filled_idx.iter().map(|&i| gt[i]).collect();
            let means: Vec<Vector3<f64>> = filled_idx
                .iter()
                .map(|&i| registered.primitives()[i].mean)
                .collect();
            metrics.geometry_filled =
                geo(&means, &pick(&init.rays.distances), &gt_f, &pick(&gt_dist));
        }
        let mae = |d: &[f64]| {
            d.iter()
                .zip(&gt_dist)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / d.len() as f64
        };
        metrics.ray_errors = Some(RayErrors {
            before_register: mae(&aligned_distances),
            after_register: mae(&init.rays.distances),
        });
    }
    artifacts.final_render = Some(final_render);

    let report = CompletionReport {
        stages: cfg.stages,
        alignment_view: cfg.alignment_view,
        anchor,
        alignment: fit,
        registration,
        refinement,
        hole_fraction: hole.hole_fraction(),
        n_context: inputs.context.len(),
        n_lifted: lifted.gaussians.len(),
        n_registered: registered.len(),
        n_filled: new_indices.len(),
        f_score_threshold: f_thresh,
        metrics,
    };
    Ok(CompletionOutput {
        scene,
        new_indices,
        report,
        timing,
        artifacts: std::mem::take(artifacts),
    })
}

fn write_artifacts(dir: &Path, a: &Artifacts) -> Result<(), String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    let err = |e: image_io::ImageError| e.to_string();
    if let Some(r) = &a.reference {
        image_io::save_rgb_png(r, dir.join("reference.png")).map_err(err)?;
    }
    if let Some(m) = &a.hole_mask {
        image_io::save_mask_png(m, dir.join("hole_mask.png")).map_err(err)?;
    }
    if let Some(d) = &a.aligned_target_depth {
        image_io::save_pfm(d, dir.join("aligned_target_depth.pfm")).map_err(err)?;
    }
    if let Some(b) = &a.context_at_target {
        image_io::save_rgb_png(&b.rgb, dir.join("context_at_target.png")).map_err(err)?;
    }
    if let Some(b) = &a.final_render {
        image_io::save_rgb_png(&b.rgb, dir.join("target_render.png")).map_err(err)?;
        image_io::save_pfm(&b.depth, dir.join("target_depth.pfm")).map_err(err)?;
        image_io::save_gray_png(&b.alpha, dir.join("target_alpha.png")).map_err(err)?;
    }
    if let Some(s) = &a.aligned {
        save_scene_ply(s, dir.join("aligned.ply")).map_err(|e| e.to_string())?;
    }
    if let Some(s) = &a.registered {
        save_scene_ply(s, dir.join("registered.ply")).map_err(|e| e.to_string())?;
    }
    Ok(())
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("reports serialize") + "\n"
}

/// Writes `completed.ply`, `report.json`, `timing.json` and image artifacts.
/// Timing lives in its own file so `report.json` is reproducible.
pub fn write_outputs(dir: &Path, out: &CompletionOutput) -> Result<(), String> {
    write_artifacts(dir, &out.artifacts)?;
    save_scene_ply(&out.scene, dir.join("completed.ply")).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("report.json"), to_json(&out.report)).map_err(|e| e.to_string())?;
    std::fs::write(dir.join("timing.json"), to_json(&out.timing)).map_err(|e| e.to_string())?;
    Ok(())
}

/// Synthetic ground truth, context and target for one seed.
pub struct OracleSetup {
    pub oracle: OracleScene,
    pub context: GaussianScene,
    pub views: Vec<ContextView>,
    pub target: Camera,
}

impl OracleSetup {
    pub fn new(cfg: &PipelineConfig) -> Result<Self, PipelineError> {
        cfg.validate()
            .map_err(|e| PipelineError::new(Stage::Setup, e))?;
        let o = &cfg.oracle;
        let spec = SceneSpec {
            seed: cfg.seed,
            ..o.scene.clone()
        };
        let oracle = generate_synthetic_scene(&spec, &cfg.render);
        let ctx_spec = ContextSpec {
            seed: cfg.seed,
            ..o.context.clone()
        };
        let context = build_context(&oracle, &o.context_frames, &ctx_spec);
        let views = o
            .context_frames
            .iter()
            .map(|&f| ContextView {
                camera: oracle.cameras[f].clone(),
                image: oracle.gt_renders[f].rgb.clone(),
            })
            .collect();
        let target = oracle.cameras[o.target_frame].clone();
        Ok(Self {
            oracle,
            context,
            views,
            target,
        })
    }

    pub fn supply(&self, cfg: &PipelineConfig, stream: u64) -> OracleSupply<'_> {
        OracleSupply {
            gt_scene: &self.oracle.gt_scene,
            corruption: CorruptionSpec {
                rng_seed: cfg.seed,
                ..cfg.oracle.corruption.clone()
            },
            lift: cfg.oracle.lift.clone(),
            degradation: Degradation {
                seed: cfg.seed,
                ..cfg.oracle.degradation.clone()
            },
            render: cfg.render.clone(),
            stream,
        }
    }

    pub fn inputs(&self) -> CompletionInputs<'_> {
        CompletionInputs {
            context: &self.context,
            views: &self.views,
            target: &self.target,
        }
    }
}

/// One synthetic completion for `cfg.seed`.
pub fn run_oracle_completion(
    cfg: &PipelineConfig,
    out_dir: Option<&Path>,
) -> Result<CompletionOutput, PipelineError> {
    let setup = OracleSetup::new(cfg)?;
    let supply = setup.supply(cfg, 0);
    run_completion_pipeline(&setup.inputs(), &supply, cfg, out_dir)
}

/// Named stage configurations of the ablation grid.
pub fn ablation_variants() -> Vec<(&'static str, StageToggles)> {
    let full = StageToggles::default();
    vec![
        ("full", full),
        ("w/o SA", StageToggles { sa: false, ..full }),
        ("w/o DA", StageToggles { da: false, ..full }),
        ("w/o RC", StageToggles { rc: false, ..full }),
        (
            "w/o DA&RC",
            StageToggles {
                da: false,
                rc: false,
                ..full
            },
        ),
        ("w/o MV", StageToggles { mv: false, ..full }),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub stages: StageToggles,
    pub seeds: Vec<u64>,
    /// Seeds on which the completion returned an error.
    pub failures: usize,
    pub chamfer: Vec<f64>,
    pub f_score: Vec<f64>,
    pub target_psnr: Vec<f64>,
    /// Mean PSNR over the context views of the context alone.
    pub context_psnr_before: Vec<f64>,
    /// Mean PSNR over the context views of the completed scene.
    pub context_psnr: Vec<f64>,
    pub mean_chamfer: f64,
    pub mean_f_score: f64,
    pub mean_target_psnr: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Mean over the finite entries only; NaN when there are none.
fn finite_mean(v: &[f64]) -> f64 {
    let ok: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
    if ok.is_empty() {
        f64::NAN
    } else {
        mean(&ok)
    }
}

/// Geometry used for ranking: the hole-filling primitives when there are
/// any, otherwise everything that was registered.
pub fn ranking_geometry(report: &CompletionReport) -> Option<&GeometryMetrics> {
    report
        .metrics
        .geometry_filled
        .as_ref()
        .or(report.metrics.geometry_registered.as_ref())
}

/// Runs every variant on every seed. Seeds run in parallel; each variant
/// shares the same synthetic inputs per seed.
///
/// A variant whose completion fails on a seed counts as a failure for that
/// seed: F-score 0, infinite Chamfer distance, NaN PSNR.
pub fn run_ablation(
    base: &PipelineConfig,
    seeds: &[u64],
    variants: &[(&str, StageToggles)],
) -> Result<Vec<AblationRow>, PipelineError> {
    let per_seed: Vec<Vec<Option<CompletionReport>>> = seeds
        .par_iter()
        .map(
            |&seed| -> Result<Vec<Option<CompletionReport>>, PipelineError> {
                let seeded = PipelineConfig {
                    seed,
                    ..base.clone()
                };
                let setup = OracleSetup::new(&seeded)?;
                let supply = setup.supply(&seeded, 0);
                Ok(variants
                    .iter()
                    .map(|(name, stages)| {
                        let cfg = PipelineConfig {
                            stages: *stages,
                            ..seeded.clone()
                        };
                        match run_completion_pipeline(&setup.inputs(), &supply, &cfg, None) {
                            Ok(o) => Some(o.report),
                            Err(e) => {
                                warn!("seed {seed}, {name}: {e}");
                                None
                            }
                        }
                    })
                    .collect())
            },
        )
        .collect::<Result<_, _>>()?;
    Ok(variants
        .iter()
        .enumerate()
        .map(|(k, (name, stages))| {
            let pick = |f: &dyn Fn(&CompletionReport) -> f64, failed: f64| {
                per_seed
                    .iter()
                    .map(|r| r[k].as_ref().map_or(failed, f))
                    .collect::<Vec<f64>>()
            };
            let chamfer = pick(
                &|r| ranking_geometry(r).map_or(f64::NAN, |g| g.chamfer),
                f64::INFINITY,
            );
            let f_score = pick(
                &|r| ranking_geometry(r).map_or(f64::NAN, |g| g.f_score),
                0.0,
            );
            let target_psnr = pick(
                &|r| r.metrics.target_final.map_or(f64::NAN, |m| m.psnr),
                f64::NAN,
            );
            let context_psnr_before = pick(
                &|r| r.metrics.context_before.map_or(f64::NAN, |m| m.psnr),
                f64::NAN,
            );
            let context_psnr = pick(
                &|r| r.metrics.context_final.map_or(f64::NAN, |m| m.psnr),
                f64::NAN,
            );
            AblationRow {
                variant: name.to_string(),
                stages: *stages,
                seeds: seeds.to_vec(),
                failures: per_seed.iter().filter(|r| r[k].is_none()).count(),
                mean_chamfer: mean(&chamfer),
                mean_f_score: mean(&f_score),
                mean_target_psnr: finite_mean(&target_psnr),
                chamfer,
                f_score,
                target_psnr,
                context_psnr_before,
                context_psnr,
            }
        })
        .collect())
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!(
        "{:<12} {:>10} {:>10} {:>12} {:>9}\n",
        "variant", "CD", "F-score", "PSNR (dB)", "failures"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<12} {:>10.4} {:>10.4} {:>12.2} {:>9}\n",
            r.variant, r.mean_chamfer, r.mean_f_score, r.mean_target_psnr, r.failures
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongRunStep {
    pub step: usize,
    pub target_frame: usize,
    pub anchor_index: usize,
    pub target_psnr: f64,
    /// Mean PSNR of the current scene over the initial context views.
    pub context_psnr: f64,
    pub chamfer: Option<f64>,
    pub f_score: Option<f64>,
    pub n_primitives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongRunReport {
    pub interval: usize,
    /// Context PSNR before the first completion.
    pub initial_context_psnr: f64,
    pub steps: Vec<LongRunStep>,
    /// Per-step Chamfer distance of the new primitives.
    pub drift_curve: Vec<f64>,
}

impl LongRunReport {
    /// Lowest running context PSNR minus its first-step value.
    pub fn worst_context_drop(&self) -> f64 {
        let first = self.steps.first().map_or(f64::NAN, |s| s.context_psnr);
        self.steps
            .iter()
            .map(|s| first - s.context_psnr)
            .fold(0.0, f64::max)
    }
}

/// Incremental completion along the synthetic trajectory: after each step
/// the merged scene becomes the context, and the completed target joins the
/// context views with its reference image.
pub fn run_long_sequence_harness(
    cfg: &PipelineConfig,
    steps: usize,
    interval: usize,
    out_dir: Option<&Path>,
) -> Result<LongRunReport, PipelineError> {
    if steps == 0 {
        return Err(PipelineError::new(
            Stage::Setup,
            "long run needs at least one step",
        ));
    }
    let targets = cfg.long_run_targets(steps, interval.max(1));
    let mut long_cfg = cfg.clone();
    long_cfg.oracle.scene.n_frames = long_cfg
        .oracle
        .scene
        .n_frames
        .max(targets.last().copied().unwrap_or(0) + 1);
    let setup = OracleSetup::new(&long_cfg)?;
    let initial_views = setup.views.clone();
    let mut context = setup.context.clone();
    let mut views = setup.views.clone();
    let initial_context_psnr =
        view_metrics(&context, &initial_views, &long_cfg.render).map_or(f64::NAN, |m| m.psnr);
    let mut out_steps = Vec::with_capacity(steps);
    for (j, &frame) in targets.iter().enumerate() {
        let target = setup.oracle.cameras[frame].clone();
        let supply = setup.supply(&long_cfg, j as u64);
        let inputs = CompletionInputs {
            context: &context,
            views: &views,
            target: &target,
        };
        let step_dir: Option<PathBuf> = out_dir.map(|d| d.join(format!("step_{j:02}")));
        let out = run_completion_pipeline(&inputs, &supply, &long_cfg, step_dir.as_deref())?;
        let geo = ranking_geometry(&out.report);
        let reference = out.artifacts.reference.clone().expect("reference produced");
        let context_psnr =
            view_metrics(&out.scene, &initial_views, &long_cfg.render).map_or(f64::NAN, |m| m.psnr);
        info!("long run step {j}: frame {frame}, context PSNR {context_psnr:.2} dB");
        out_steps.push(LongRunStep {
            step: j,
            target_frame: frame,
            anchor_index: out.report.anchor.anchor_index,
            target_psnr: out.report.metrics.target_final.map_or(f64::NAN, |m| m.psnr),
            context_psnr,
            chamfer: geo.map(|g| g.chamfer),
            f_score: geo.map(|g| g.f_score),
            n_primitives: out.scene.len(),
        });
        context = out.scene;
        views.push(ContextView {
            camera: target,
            image: reference,
        });
    }
    let drift_curve = out_steps
        .iter()
        .map(|s| s.chamfer.unwrap_or(f64::NAN))
        .collect();
    Ok(LongRunReport {
        interval,
        initial_context_psnr,
        steps: out_steps,
        drift_curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.oracle.scene.width = 48;
        cfg.oracle.scene.height = 48;
        cfg.oracle.scene.n_primitives = 4000;
        cfg.oracle.scene.n_frames = 8;
        cfg.oracle.context.n_primitives = 2500;
        cfg.register.iterations = 5;
        cfg.refine.iterations = 5;
        cfg
    }

    #[test]
    fn config_round_trips_through_key_values() {
        let mut cfg = tiny();
        cfg.stages.mv = false;
        cfg.alignment_view = AlignmentView::Target;
        cfg.f_score_threshold = Some(0.3);
        let back = PipelineConfig::parse(&cfg.to_key_values()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(
            PipelineConfig::KEYS.len(),
            cfg.to_key_values().lines().count()
        );
    }

    #[test]
    fn config_rejects_unknown_and_invalid() {
        assert!(matches!(
            PipelineConfig::parse("bogus = 1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(PipelineConfig::parse("affine_scale = 0").is_err());
        assert!(PipelineConfig::parse("outlier_fraction = 1.5").is_err());
        assert!(PipelineConfig::parse("target_frame = 40").is_err());
        assert!(PipelineConfig::parse("stages = sa,xx").is_err());
        assert_eq!(
            PipelineConfig::parse("stages = none")
                .unwrap()
                .stages
                .label(),
            "none"
        );
    }

    #[test]
    fn timing_total_is_sum_of_stages() {
        let mut t = TimingReport::default();
        t.reference_supply.seconds = 0.001;
        t.target_supply.seconds = 0.002;
        t.depth_alignment.seconds = 0.003;
        t.multi_view_refine.skipped = true;
        t.finalize();
        assert!((t.total - 0.006).abs() < 1e-15);
        assert!(t.table().contains("skipped"));
    }

    #[test]
    fn disabled_stages_are_reported_skipped() {
        let mut cfg = tiny();
        cfg.stages = StageToggles::parse("sa").unwrap();
        let out = run_oracle_completion(&cfg, None).unwrap();
        assert!(
            out.timing.depth_alignment.skipped
                && out.timing.ray_register.skipped
                && out.timing.multi_view_refine.skipped
        );
        assert_eq!(out.timing.ray_register.seconds, 0.0);
        assert!(out.report.registration.is_none() && out.report.refinement.is_none());
        assert_eq!(out.report.alignment, AffineDepthFit::identity());
    }

    #[test]
    fn stage_errors_name_the_stage() {
        let cfg = tiny();
        let setup = OracleSetup::new(&cfg).unwrap();
        let inputs = CompletionInputs {
            context: &setup.context,
            views: &[],
            target: &setup.target,
        };
        let err = run_completion_pipeline(&inputs, &setup.supply(&cfg, 0), &cfg, None).unwrap_err();
        assert_eq!(err.stage, Stage::AnchorSelection);
    }

    #[test]
    fn failure_flushes_partial_artifacts() {
        struct NoLift<'a>(OracleSupply<'a>);
        impl TargetSupply for NoLift<'_> {
            fn reference_image(&self, t: &Camera, a: &Camera) -> Result<RgbImage, String> {
                self.0.reference_image(t, a)
            }
            fn lift(&self, _: &Camera, _: &Camera, _: &RgbImage) -> Result<Lifted, String> {
                Err("generator unavailable".into())
            }
        }
        let cfg = tiny();
        let setup = OracleSetup::new(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let err = run_completion_pipeline(
            &setup.inputs(),
            &NoLift(setup.supply(&cfg, 0)),
            &cfg,
            Some(dir.path()),
        )
        .unwrap_err();
        assert_eq!(err.stage, Stage::TargetSupply);
        assert!(dir.path().join("reference.png").exists());
        assert!(!dir.path().join("completed.ply").exists());
    }
}
