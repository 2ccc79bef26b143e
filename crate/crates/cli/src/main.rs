//! Command-line front end for splat scene completion.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use splatfill::camera::load_cameras_json;
use splatfill::dataset::{export_oracle_inputs, load_inputs};
use splatfill::image_io::{load_rgb_png, save_gray_png, save_pfm, save_rgb_png};
use splatfill::metrics::{default_f_threshold, geometry_metrics, image_metrics};
use splatfill::pipeline::{
    ablation_table, ablation_variants, run_ablation, run_completion_pipeline,
    run_long_sequence_harness, run_oracle_completion, to_json, CompletionOutput, PipelineConfig,
};
use splatfill::ply::load_scene_ply;
use splatfill::render;

#[derive(Parser)]
#[command(
    name = "splatfill",
    version,
    about = "Complete Gaussian splat scenes at unobserved poses"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic completion input directory.
    SynthGenerate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one completion, synthetic unless `--input` is given.
    Complete {
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory written by `synth-generate` (or laid out the same way).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Incremental completion along a synthetic trajectory.
    LongRun {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        interval: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one camera of a scene to rgb.png, depth.pfm and alpha.png.
    Render {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare two scenes (.ply) or two images (.png); prints JSON.
    Metrics {
        pred: PathBuf,
        gt: PathBuf,
        /// F-score distance for scenes; defaults to 5% of the ground-truth diagonal.
        #[arg(long)]
        f_threshold: Option<f64>,
    },
    /// Run every stage ablation over several seeds.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Configuration sources, applied in order: defaults (or the input
/// directory's `config.cfg`), `--config`, `--set`, then the named flags.
#[derive(Args, Default)]
struct ConfigArgs {
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any configuration key, as `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    anchor_gate_deg: Option<f64>,
    #[arg(long)]
    ransac_iters: Option<usize>,
    #[arg(long)]
    ransac_thresh_frac: Option<f64>,
    #[arg(long)]
    reg_iters: Option<usize>,
    #[arg(long)]
    reg_lr: Option<f64>,
    #[arg(long)]
    lambda_d: Option<f64>,
    #[arg(long)]
    lambda_s: Option<f64>,
    #[arg(long)]
    lambda_c: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    refine_iters: Option<usize>,
    #[arg(long)]
    refine_lr: Option<f64>,
    #[arg(long)]
    lambda_mv: Option<f64>,
    #[arg(long)]
    n_context_views: Option<usize>,
}

impl ConfigArgs {
    fn named(&self) -> Vec<(&'static str, Option<String>)> {
        fn s<T: ToString>(v: &Option<T>) -> Option<String> {
            v.as_ref().map(T::to_string)
        }
        vec![
            ("seed", s(&self.seed)),
            ("anchor_gate_deg", s(&self.anchor_gate_deg)),
            ("ransac_iters", s(&self.ransac_iters)),
            ("ransac_thresh_frac", s(&self.ransac_thresh_frac)),
            ("reg_iters", s(&self.reg_iters)),
            ("reg_lr", s(&self.reg_lr)),
            ("lambda_d", s(&self.lambda_d)),
            ("lambda_s", s(&self.lambda_s)),
            ("lambda_c", s(&self.lambda_c)),
            ("tau", s(&self.tau)),
            ("refine_iters", s(&self.refine_iters)),
            ("refine_lr", s(&self.refine_lr)),
            ("lambda_mv", s(&self.lambda_mv)),
            ("n_context_views", s(&self.n_context_views)),
        ]
    }

    fn resolve(&self, base: Option<PipelineConfig>) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                let mut cfg = base.unwrap_or_default();
                let kv = splatfill::config::KeyValues::parse(&text)
                    .with_context(|| format!("parsing {}", path.display()))?;
                for (k, v) in kv.iter() {
                    cfg.apply(k, v)
                        .with_context(|| format!("in {}", path.display()))?;
                }
                cfg
            }
            None => base.unwrap_or_default(),
        };
        for pair in &self.set {
            let (k, v) = pair
                .split_once('=')
                .with_context(|| format!("--set expects key=value, got '{pair}'"))?;
            cfg.apply(k.trim(), v.trim())?;
        }
        for (k, v) in self.named() {
            if let Some(v) = v {
                cfg.apply(k, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn summarize(out: &CompletionOutput) {
    let r = &out.report;
    info!(
        "anchor view {} ({:.1} deg), {} lifted, {} filled",
        r.anchor.anchor_index, r.anchor.relative_rotation_deg, r.n_lifted, r.n_filled
    );
    println!("{}", out.timing.table());
}

fn write_text(path: &Path, text: String) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthGenerate { config, out } => {
            let cfg = config.resolve(None)?;
            export_oracle_inputs(&cfg, &out)?;
            info!("wrote inputs to {}", out.display());
        }
        Command::Complete { config, input, out } => {
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let result = match input {
                Some(dir) => {
                    let disk = load_inputs(&dir)?;
                    let cfg = config.resolve(disk.config.clone())?;
                    run_completion_pipeline(&disk.inputs(), &disk.supply, &cfg, Some(&out))?
                }
                None => run_oracle_completion(&config.resolve(None)?, Some(&out))?,
            };
            summarize(&result);
        }
        Command::LongRun {
            config,
            steps,
            interval,
            out,
        } => {
            let cfg = config.resolve(None)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let report = run_long_sequence_harness(
                &cfg,
                steps.unwrap_or(cfg.long_run_steps),
                interval.unwrap_or(cfg.long_run_interval),
                Some(&out),
            )?;
            write_text(&out.join("long_run.json"), to_json(&report))?;
            for s in &report.steps {
                println!(
                    "step {:>2} frame {:>3}: target {:.2} dB, context {:.2} dB, CD {}",
                    s.step,
                    s.target_frame,
                    s.target_psnr,
                    s.context_psnr,
                    s.chamfer.map_or("-".into(), |c| format!("{c:.4}"))
                );
            }
        }
        Command::Render {
            config,
            scene,
            cameras,
            index,
            out,
        } => {
            let cfg = config.resolve(None)?;
            let scene =
                load_scene_ply(&scene).with_context(|| format!("loading {}", scene.display()))?;
            let cams = load_cameras_json(&cameras)
                .with_context(|| format!("loading {}", cameras.display()))?;
            let Some(cam) = cams.get(index) else {
                bail!("camera index {index} out of range ({} cameras)", cams.len());
            };
            let buf = render(&scene, cam, &cfg.render);
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            save_rgb_png(&buf.rgb, out.join("rgb.png"))?;
            save_pfm(&buf.depth, out.join("depth.pfm"))?;
            save_gray_png(&buf.alpha, out.join("alpha.png"))?;
        }
        Command::Metrics {
            pred,
            gt,
            f_threshold,
        } => {
            let ext = |p: &Path| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(str::to_ascii_lowercase)
            };
            let json = match (ext(&pred).as_deref(), ext(&gt).as_deref()) {
                (Some("ply"), Some("ply")) => {
                    let a = load_scene_ply(&pred)
                        .with_context(|| format!("loading {}", pred.display()))?
                        .means();
                    let b = load_scene_ply(&gt)
                        .with_context(|| format!("loading {}", gt.display()))?
                        .means();
                    let thresh = f_threshold.unwrap_or_else(|| default_f_threshold(&b));
                    to_json(&geometry_metrics(&a, &b, thresh, None)?)
                }
                (Some("png"), Some("png")) => {
                    let a = load_rgb_png(&pred)
                        .with_context(|| format!("loading {}", pred.display()))?;
                    let b =
                        load_rgb_png(&gt).with_context(|| format!("loading {}", gt.display()))?;
                    to_json(&image_metrics(&a, &b)?)
                }
                _ => bail!("metrics compares two .ply scenes or two .png images"),
            };
            print!("{json}");
        }
        Command::Ablate { config, seeds, out } => {
            let cfg = config.resolve(None)?;
            let rows = run_ablation(&cfg, &seeds, &ablation_variants())?;
            print!("{}", ablation_table(&rows));
            if let Some(out) = out {
                std::fs::create_dir_all(&out)
                    .with_context(|| format!("creating {}", out.display()))?;
                write_text(&out.join("ablation.json"), to_json(&rows))?;
            }
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
