//! Metric-aware completion of Gaussian splat scenes.
//!
//! A completion step takes a metrically scaled context scene, a reference
//! image at an unobserved target pose and a feed-forward prediction of the
//! target Gaussians, and registers the prediction into the context:
//!
//! 1. [`anchor`] picks the stereo anchor view paired with the target image.
//! 2. [`depth_align`] fits a robust affine map between predicted and context
//!    depth in the anchor view.
//! 3. [`ray_register`] slides every target Gaussian along its camera ray to
//!    minimise depth, stereo and photometric residuals.
//! 4. [`integrator`] keeps only primitives that fill holes of the context,
//!    merges them and refines their opacities against several views.
//!
//! [`oracle`] generates synthetic ground truth standing in for the learned
//! priors, [`metrics`] scores results, and [`pipeline`] wires everything
//! together (including the ablation grid and long-sequence harness).

pub mod anchor;
pub mod camera;
pub mod config;
pub mod dataset;
pub mod depth_align;
pub mod image_io;
pub mod integrator;
pub mod metrics;
pub mod oracle;
pub mod pipeline;
pub mod plane;
pub mod ply;
pub mod ray_register;
pub mod render;
pub mod scene;

pub use camera::Camera;
pub use plane::{DepthMap, Mask, Plane, RgbImage};
pub use render::{render, RenderBuffers, RenderConfig};
pub use scene::{GaussianPrimitive, GaussianScene, LossWeights, Provenance};
