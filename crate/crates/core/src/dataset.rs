//! Completion inputs on disk.
//!
//! ```text
//! config.cfg              configuration the data was produced with
//! context.ply             context Gaussians
//! context_cameras.json    one camera per context view
//! context_views/NNN.png   context images, in camera order
//! target_camera.json      the target camera (one-element list)
//! anchor_camera.json      view the prediction was made against (one-element list)
//! reference.png           generated image at the target pose
//! target.ply              lifted target Gaussians
//! target_depth.pfm        predicted depth at the target pose
//! anchor_depth.pfm        predicted depth at the anchor pose
//! target_truth.json       optional: true position of every lifted Gaussian
//! gt.ply, cameras.json    optional: full ground truth and trajectory
//! ```
//!
//! [`export_oracle_inputs`] writes this layout from a synthetic scene and
//! [`load_inputs`] reads it back for [`crate::pipeline::run_completion_pipeline`].

use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::camera::{load_cameras_json, save_cameras_json, Camera};
use crate::image_io::{load_pfm, load_rgb_png, save_pfm, save_rgb_png};
use crate::pipeline::{
    choose_anchor, CompletionInputs, ContextView, Lifted, OracleSetup, PipelineConfig,
    PrecomputedSupply, TargetSupply,
};
use crate::ply::{load_scene_ply, save_scene_ply};
use crate::scene::GaussianScene;

#[derive(Debug, thiserror::Error)]
#[error("{path}: {message}")]
pub struct DatasetError {
    pub path: PathBuf,
    pub message: String,
}

fn at<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> DatasetError + '_ {
    move |e| DatasetError {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn single_camera(path: &Path) -> Result<Camera, DatasetError> {
    let mut cams = load_cameras_json(path).map_err(at(path))?;
    if cams.len() != 1 {
        return Err(at(path)(format!(
            "expected one camera, found {}",
            cams.len()
        )));
    }
    Ok(cams.remove(0))
}

fn view_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("context_views").join(format!("{i:03}.png"))
}

/// Inputs read from disk, owning everything a completion borrows.
pub struct DiskInputs {
    /// Contents of `config.cfg`, when present.
    pub config: Option<PipelineConfig>,
    pub context: GaussianScene,
    pub views: Vec<ContextView>,
    pub target: Camera,
    pub supply: PrecomputedSupply,
}

impl DiskInputs {
    pub fn inputs(&self) -> CompletionInputs<'_> {
        CompletionInputs {
            context: &self.context,
            views: &self.views,
            target: &self.target,
        }
    }
}

/// Generates a synthetic scene for `cfg` and writes the layout above into
/// `dir`. The prediction is made against the anchor `cfg` selects.
pub fn export_oracle_inputs(cfg: &PipelineConfig, dir: &Path) -> Result<(), DatasetError> {
    let setup = OracleSetup::new(cfg).map_err(at(dir))?;
    let cams: Vec<Camera> = setup.views.iter().map(|v| v.camera.clone()).collect();
    let anchor = choose_anchor(&setup.target, &cams, cfg).map_err(at(dir))?;
    let anchor_cam = &cams[anchor.anchor_index];
    let supply = setup.supply(cfg, 0);
    let reference = supply
        .reference_image(&setup.target, anchor_cam)
        .map_err(at(dir))?;
    let lifted = supply
        .lift(&setup.target, anchor_cam, &reference)
        .map_err(at(dir))?;

    std::fs::create_dir_all(dir.join("context_views")).map_err(at(dir))?;
    let file = |name: &str| dir.join(name);
    std::fs::write(file("config.cfg"), cfg.to_key_values()).map_err(at(&file("config.cfg")))?;
    save_scene_ply(&setup.context, file("context.ply")).map_err(at(&file("context.ply")))?;
    save_cameras_json(&cams, file("context_cameras.json"))
        .map_err(at(&file("context_cameras.json")))?;
    for (i, v) in setup.views.iter().enumerate() {
        save_rgb_png(&v.image, view_path(dir, i)).map_err(at(&view_path(dir, i)))?;
    }
    save_cameras_json(
        std::slice::from_ref(&setup.target),
        file("target_camera.json"),
    )
    .map_err(at(&file("target_camera.json")))?;
    save_cameras_json(std::slice::from_ref(anchor_cam), file("anchor_camera.json"))
        .map_err(at(&file("anchor_camera.json")))?;
    save_rgb_png(&reference, file("reference.png")).map_err(at(&file("reference.png")))?;
    save_scene_ply(&lifted.gaussians, file("target.ply")).map_err(at(&file("target.ply")))?;
    save_pfm(&lifted.depth_target, file("target_depth.pfm"))
        .map_err(at(&file("target_depth.pfm")))?;
    save_pfm(&lifted.depth_anchor, file("anchor_depth.pfm"))
        .map_err(at(&file("anchor_depth.pfm")))?;
    if let Some(gt) = &lifted.gt_points {
        let pts: Vec<[f64; 3]> = gt.iter().map(|p| [p.x, p.y, p.z]).collect();
        let text = serde_json::to_string(&pts).map_err(at(&file("target_truth.json")))?;
        std::fs::write(file("target_truth.json"), text).map_err(at(&file("target_truth.json")))?;
    }
    save_scene_ply(&setup.oracle.gt_scene, file("gt.ply")).map_err(at(&file("gt.ply")))?;
    save_cameras_json(&setup.oracle.cameras, file("cameras.json"))
        .map_err(at(&file("cameras.json")))?;
    Ok(())
}

/// Reads the layout above. Optional files may be absent.
pub fn load_inputs(dir: &Path) -> Result<DiskInputs, DatasetError> {
    let file = |name: &str| dir.join(name);
    let config = match std::fs::read_to_string(file("config.cfg")) {
        Ok(text) => Some(PipelineConfig::parse(&text).map_err(at(&file("config.cfg")))?),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(at(&file("config.cfg"))(e)),
    };
    let context = load_scene_ply(file("context.ply")).map_err(at(&file("context.ply")))?;
    let cams = load_cameras_json(file("context_cameras.json"))
        .map_err(at(&file("context_cameras.json")))?;
    let views = cams
        .into_iter()
        .enumerate()
        .map(|(i, camera)| {
            let path = view_path(dir, i);
            let image = load_rgb_png(&path).map_err(at(&path))?;
            if image.width() != camera.width() as usize
                || image.height() != camera.height() as usize
            {
                return Err(at(&path)("image size does not match its camera"));
            }
            Ok(ContextView { camera, image })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let target = single_camera(&file("target_camera.json"))?;
    let anchor = single_camera(&file("anchor_camera.json"))?;
    let reference = load_rgb_png(file("reference.png")).map_err(at(&file("reference.png")))?;
    let gaussians = load_scene_ply(file("target.ply")).map_err(at(&file("target.ply")))?;
    let depth_target = load_pfm(file("target_depth.pfm")).map_err(at(&file("target_depth.pfm")))?;
    let depth_anchor = load_pfm(file("anchor_depth.pfm")).map_err(at(&file("anchor_depth.pfm")))?;
    let gt_points = match std::fs::read_to_string(file("target_truth.json")) {
        Ok(text) => {
            let pts: Vec<[f64; 3]> =
                serde_json::from_str(&text).map_err(at(&file("target_truth.json")))?;
            Some(pts.into_iter().map(Vector3::from).collect())
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
        Err(e) => return Err(at(&file("target_truth.json"))(e)),
    };
    Ok(DiskInputs {
        config,
        context,
        views,
        target,
        supply: PrecomputedSupply {
            reference,
            lifted: Lifted {
                gaussians,
                depth_target,
                depth_anchor,
                gt_points,
            },
            anchor: Some(anchor),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{run_completion_pipeline, run_oracle_completion};

    fn small() -> PipelineConfig {
        PipelineConfig::parse("width = 40\nheight = 40\ncontext_primitives = 2000\ngt_primitives = 4000\nreg_iters = 5\nrefine_iters = 3\n").unwrap()
    }

    #[test]
    fn exported_inputs_reproduce_the_oracle_run() {
        let cfg = small();
        let dir = tempfile::tempdir().unwrap();
        export_oracle_inputs(&cfg, dir.path()).unwrap();
        let disk = load_inputs(dir.path()).unwrap();
        assert_eq!(disk.config.as_ref(), Some(&cfg));
        let from_disk = run_completion_pipeline(&disk.inputs(), &disk.supply, &cfg, None).unwrap();
        let direct = run_oracle_completion(&cfg, None).unwrap();
        // Images pass through 8-bit PNG and depth through f32, so only the
        // structure is expected to match exactly.
        assert_eq!(from_disk.report.n_lifted, direct.report.n_lifted);
        assert_eq!(
            from_disk.report.anchor.anchor_index,
            direct.report.anchor.anchor_index
        );
        assert!((from_disk.report.alignment.scale - direct.report.alignment.scale).abs() < 1e-3);
    }

    #[test]
    fn wrong_anchor_is_rejected() {
        let cfg = small();
        let dir = tempfile::tempdir().unwrap();
        export_oracle_inputs(&cfg, dir.path()).unwrap();
        let disk = load_inputs(dir.path()).unwrap();
        let other = PipelineConfig {
            stages: crate::pipeline::StageToggles {
                sa: false,
                ..cfg.stages
            },
            ..cfg.clone()
        };
        let err = run_completion_pipeline(&disk.inputs(), &disk.supply, &other, None)
            .err()
            .unwrap();
        assert!(err.to_string().contains("different anchor"), "{err}");
    }

    #[test]
    fn missing_files_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_inputs(dir.path()).err().unwrap();
        assert!(err.path.ends_with("context.ply"));
    }
}
