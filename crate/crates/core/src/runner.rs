//! High-level run orchestration shared by the CLI and tests: fit a model
//! from a run config, render images from a checkpoint, evaluate held-out
//! PSNR, and dump per-ray stage histograms.

use crate::error::{Error, Result};
use crate::geometry::generate_ray;
use crate::io::{
    config_hash, read_checkpoint, read_pose_file, read_scene_file, render_run_config,
    write_checkpoint, write_depth_grid, write_histogram_block, write_pose_file, write_ppm,
    write_text, RunConfig,
};
use crate::scene::{make_dataset, Dataset, ImageBuffer, SceneOracle};
use crate::trainer::{evaluate, fit, render_rays, Metrics, RenderMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Files produced by [`run_fit`].
#[derive(Debug, Clone)]
pub struct FitArtifacts {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub poses: PathBuf,
    pub config: PathBuf,
    pub final_eval: Metrics,
}

/// Loads the scene named by the config, or the built-in toy scene.
pub fn load_scene(cfg: &RunConfig) -> Result<SceneOracle> {
    match &cfg.scene_path {
        Some(path) => read_scene_file(Path::new(path)),
        None => Ok(SceneOracle::toy()),
    }
}

/// Synthesizes the dataset the config describes (deterministic per seed).
pub fn build_dataset(cfg: &RunConfig, scene: &SceneOracle) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.dataset_seed);
    make_dataset(scene, cfg.n_cameras, cfg.image_size, &mut rng, &cfg.dataset)
}

/// Trains from a run config and writes `checkpoint.bin`, `loss_log.txt`,
/// `poses.txt`, and `config_used.txt` into `out_dir`. The loss log carries
/// one record per step plus a final held-out evaluation line.
pub fn run_fit(cfg: &RunConfig, out_dir: &Path) -> Result<FitArtifacts> {
    std::fs::create_dir_all(out_dir)?;
    let scene = load_scene(cfg)?;
    let dataset = build_dataset(cfg, &scene)?;

    let mut log_bytes: Vec<u8> = Vec::new();
    let state = fit(&cfg.train, &dataset, &mut log_bytes)?;

    let final_eval = evaluate(&state.prop, &state.nerf, &cfg.train, &dataset, &dataset.test_indices)?;
    log_bytes.extend_from_slice(
        format!("final_eval mse={:.12e} psnr={:.6}\n", final_eval.mse, final_eval.psnr).as_bytes(),
    );

    let checkpoint = out_dir.join("checkpoint.bin");
    let log = out_dir.join("loss_log.txt");
    let poses = out_dir.join("poses.txt");
    let config = out_dir.join("config_used.txt");
    write_checkpoint(&checkpoint, &state.prop, &state.nerf, state.step, &config_hash(cfg))?;
    std::fs::write(&log, log_bytes)?;
    write_pose_file(&poses, &dataset.poses)?;
    write_text(&config, &render_run_config(cfg))?;
    Ok(FitArtifacts { checkpoint, log, poses, config, final_eval })
}

fn load_matching_checkpoint(
    checkpoint: &Path,
    cfg: &RunConfig,
) -> Result<(crate::network::ParamStore, crate::network::ParamStore)> {
    let (prop, nerf, _step, hash) = read_checkpoint(checkpoint)?;
    if hash != config_hash(cfg) {
        return Err(Error::invalid(
            "checkpoint was trained under a different config (hash mismatch)",
        ));
    }
    Ok((prop, nerf))
}

/// Renders camera `index` from a pose file and writes the RGB image (binary
/// PPM) and the median-depth grid (plain text).
pub fn run_render(
    checkpoint: &Path,
    cfg: &RunConfig,
    poses_path: &Path,
    index: usize,
    out_image: &Path,
    out_depth: Option<&Path>,
) -> Result<()> {
    let (prop, nerf) = load_matching_checkpoint(checkpoint, cfg)?;
    let poses = read_pose_file(poses_path)?;
    if index >= poses.poses.len() {
        return Err(Error::invalid(format!(
            "camera index {index} out of range ({} poses)",
            poses.poses.len()
        )));
    }
    let intr = &poses.intrinsics;
    let bounds = crate::geometry::RayBounds { t_near: cfg.dataset.t_near, t_far: cfg.dataset.t_far };
    let mut rays = Vec::with_capacity(intr.width * intr.height);
    for py in 0..intr.height {
        for px in 0..intr.width {
            rays.push(generate_ray(&poses.poses[index], intr, px as f64 + 0.5, py as f64 + 0.5, bounds)?);
        }
    }
    let renders = render_rays(&prop, &nerf, &cfg.train, &rays, RenderMode::Eval)?;
    let mut img = ImageBuffer::new(intr.width, intr.height);
    let mut depths = Vec::with_capacity(renders.len());
    for (i, r) in renders.iter().enumerate() {
        img.pixels[i] = r.rgb;
        depths.push(r.median_depth);
    }
    write_ppm(out_image, &img)?;
    if let Some(dp) = out_depth {
        write_depth_grid(dp, intr.width, intr.height, &depths)?;
    }
    Ok(())
}

/// Re-synthesizes the dataset and reports held-out PSNR/MSE of the
/// checkpoint.
pub fn run_eval(checkpoint: &Path, cfg: &RunConfig) -> Result<Metrics> {
    let (prop, nerf) = load_matching_checkpoint(checkpoint, cfg)?;
    let scene = load_scene(cfg)?;
    let dataset = build_dataset(cfg, &scene)?;
    evaluate(&prop, &nerf, &cfg.train, &dataset, &dataset.test_indices)
}

/// Renders one pixel's ray and dumps every stage histogram (plus the final
/// metric-space histogram) in the text debug format.
pub fn run_plot_histogram(
    checkpoint: &Path,
    cfg: &RunConfig,
    poses_path: &Path,
    index: usize,
    px: f64,
    py: f64,
) -> Result<String> {
    let (prop, nerf) = load_matching_checkpoint(checkpoint, cfg)?;
    let poses = read_pose_file(poses_path)?;
    if index >= poses.poses.len() {
        return Err(Error::invalid(format!("camera index {index} out of range")));
    }
    let bounds = crate::geometry::RayBounds { t_near: cfg.dataset.t_near, t_far: cfg.dataset.t_far };
    let ray = generate_ray(&poses.poses[index], &poses.intrinsics, px, py, bounds)?;
    let render = crate::trainer::render_ray(&ray, &prop, &nerf, &cfg.train, RenderMode::Eval)?;
    let mut out = String::new();
    for (k, hist) in render.stage_hists.iter().enumerate() {
        let label = if k + 1 == render.stage_hists.len() {
            "final".to_string()
        } else {
            format!("stage {k}")
        };
        write_histogram_block(&mut out, &label, hist);
    }
    write_histogram_block(&mut out, "final-metric", &render.final_hist_t);
    Ok(out)
}
