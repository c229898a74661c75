//! File formats: pose files, scene files, run configuration, checkpoints,
//! PPM images, depth grids, and the histogram debug dump. Byte-level
//! layouts are documented in FORMATS.md at the repository root.

use crate::error::{Error, Result};
use crate::geometry::{CameraPose, DistanceCurve, Intrinsics, Mat3, PoseSet, Vec3};
use crate::histograms::{DistanceSpace, WeightHistogram};
use crate::network::{MlpSpec, ParamStore};
use crate::scene::{Albedo, DatasetOptions, ImageBuffer, Primitive, SceneOracle, Shape};
use crate::trainer::TrainConfig;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

// ---------------------------------------------------------------------------
// Pose files

/// Writes the pose set: header line, then one record per camera holding the
/// 3x4 camera-to-world matrix row-major plus focal/width/height.
pub fn write_pose_file(path: &Path, set: &PoseSet) -> Result<()> {
    let mut out = String::from("unerf-poses v1\n");
    for pose in &set.poses {
        let r = &pose.rotation;
        let p = &pose.position;
        let mut fields: Vec<String> = Vec::with_capacity(15);
        for row in 0..3 {
            for col in 0..3 {
                fields.push(format!("{:.17e}", r[(row, col)]));
            }
            fields.push(format!("{:.17e}", p[row]));
        }
        fields.push(format!("{:.17e}", set.intrinsics.focal_px));
        fields.push(set.intrinsics.width.to_string());
        fields.push(set.intrinsics.height.to_string());
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_pose_file(path: &Path) -> Result<PoseSet> {
    let text = std::fs::read_to_string(path)?;
    let ctx = path.display().to_string();
    let mut lines = text.lines();
    match lines.next() {
        Some("unerf-poses v1") => {}
        other => return Err(Error::parse(&ctx, format!("bad header {other:?}"))),
    }
    let mut poses = Vec::new();
    let mut intrinsics: Option<Intrinsics> = None;
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 15 {
            return Err(Error::parse(&ctx, format!("line {}: want 15 fields, got {}", ln + 2, toks.len())));
        }
        let nums: Vec<f64> = toks[..13]
            .iter()
            .map(|t| t.parse().map_err(|e| Error::parse(&ctx, format!("line {}: {e}", ln + 2))))
            .collect::<Result<_>>()?;
        let rotation = Mat3::new(
            nums[0], nums[1], nums[2], nums[4], nums[5], nums[6], nums[8], nums[9], nums[10],
        );
        let position = Vec3::new(nums[3], nums[7], nums[11]);
        let intr = Intrinsics {
            focal_px: nums[12],
            width: toks[13].parse().map_err(|e| Error::parse(&ctx, format!("width: {e}")))?,
            height: toks[14].parse().map_err(|e| Error::parse(&ctx, format!("height: {e}")))?,
        };
        match &intrinsics {
            None => intrinsics = Some(intr),
            Some(prev) if *prev != intr => {
                return Err(Error::parse(&ctx, "intrinsics must be shared across cameras"))
            }
            _ => {}
        }
        poses.push(CameraPose { rotation, position });
    }
    let intrinsics = intrinsics.ok_or_else(|| Error::parse(&ctx, "no cameras"))?;
    PoseSet::new(poses, intrinsics)
}

// ---------------------------------------------------------------------------
// Scene files

fn color_fields(c: &[f64; 3]) -> String {
    format!("{} {} {}", c[0], c[1], c[2])
}

/// Writes the scene: versioned header, background line, one primitive per
/// line.
pub fn write_scene_file(path: &Path, scene: &SceneOracle) -> Result<()> {
    let mut out = String::from("unerf-scene v1\n");
    out.push_str(&format!("background {}\n", color_fields(&scene.background)));
    for p in &scene.primitives {
        let (geom, kind) = match &p.shape {
            Shape::Sphere { center, radius } => {
                (format!("{} {} {} {}", center.x, center.y, center.z, radius), "sphere")
            }
            Shape::Cuboid { center, half_extent } => (
                format!(
                    "{} {} {} {} {} {}",
                    center.x, center.y, center.z, half_extent.x, half_extent.y, half_extent.z
                ),
                "box",
            ),
        };
        match &p.albedo {
            Albedo::Constant(c) => {
                out.push_str(&format!("{kind} {geom} {} {}\n", p.density, color_fields(c)));
            }
            Albedo::Textured { base, amplitude, frequency } => {
                out.push_str(&format!(
                    "{kind}-tex {geom} {} {} {amplitude} {frequency}\n",
                    p.density,
                    color_fields(base)
                ));
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_scene_file(path: &Path) -> Result<SceneOracle> {
    let text = std::fs::read_to_string(path)?;
    let ctx = path.display().to_string();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "unerf-scene v1")) => {}
        other => return Err(Error::parse(&ctx, format!("bad header {other:?}"))),
    }
    let mut background = [0.5; 3];
    let mut primitives = Vec::new();
    for (ln, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        let nums = |from: usize, n: usize| -> Result<Vec<f64>> {
            if toks.len() < from + n {
                return Err(Error::parse(&ctx, format!("line {}: too few fields", ln + 1)));
            }
            toks[from..from + n]
                .iter()
                .map(|t| t.parse().map_err(|e| Error::parse(&ctx, format!("line {}: {e}", ln + 1))))
                .collect()
        };
        match toks[0] {
            "background" => {
                let v = nums(1, 3)?;
                background = [v[0], v[1], v[2]];
            }
            "sphere" | "sphere-tex" => {
                let textured = toks[0].ends_with("-tex");
                let v = nums(1, if textured { 10 } else { 8 })?;
                let albedo = if textured {
                    Albedo::Textured { base: [v[5], v[6], v[7]], amplitude: v[8], frequency: v[9] }
                } else {
                    Albedo::Constant([v[5], v[6], v[7]])
                };
                primitives.push(Primitive {
                    shape: Shape::Sphere { center: Vec3::new(v[0], v[1], v[2]), radius: v[3] },
                    density: v[4],
                    albedo,
                });
            }
            "box" | "box-tex" => {
                let textured = toks[0].ends_with("-tex");
                let v = nums(1, if textured { 12 } else { 10 })?;
                let albedo = if textured {
                    Albedo::Textured { base: [v[7], v[8], v[9]], amplitude: v[10], frequency: v[11] }
                } else {
                    Albedo::Constant([v[7], v[8], v[9]])
                };
                primitives.push(Primitive {
                    shape: Shape::Cuboid {
                        center: Vec3::new(v[0], v[1], v[2]),
                        half_extent: Vec3::new(v[3], v[4], v[5]),
                    },
                    density: v[6],
                    albedo,
                });
            }
            other => return Err(Error::parse(&ctx, format!("line {}: unknown record '{other}'", ln + 1))),
        }
    }
    SceneOracle::new(primitives, background)
}

// ---------------------------------------------------------------------------
// Run configuration

/// Full run description: training hyperparameters plus dataset synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub n_cameras: usize,
    pub image_size: usize,
    pub dataset: DatasetOptions,
    pub dataset_seed: u64,
    /// Scene description path; the built-in toy scene when absent.
    pub scene_path: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::desk(),
            n_cameras: 8,
            image_size: 64,
            dataset: DatasetOptions::default(),
            dataset_seed: 7,
            scene_path: None,
        }
    }
}

fn parse_kv(text: &str, ctx: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(ctx, format!("line {}: expected key = value", ln + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Parses `key = value` config text, starting from the preset named by the
/// `preset` key (`desk` by default, or `paper`), with every other key
/// overriding one field.
pub fn parse_run_config(text: &str, ctx: &str) -> Result<RunConfig> {
    let map = parse_kv(text, ctx)?;
    let mut cfg = RunConfig::default();
    if let Some(preset) = map.get("preset") {
        cfg.train = match preset.as_str() {
            "desk" => TrainConfig::desk(),
            "paper" => TrainConfig::paper(),
            other => return Err(Error::parse(ctx, format!("unknown preset '{other}'"))),
        };
    }
    for (key, value) in &map {
        apply_config_key(&mut cfg, key, value).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::parse(ctx, format!("key '{key}': {m}")),
            e => e,
        })?;
    }
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn read_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_run_config(&text, &path.display().to_string())
}

/// Applies one `key=value` override (the CLI's `--set` flag funnels here).
pub fn apply_config_key(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(v: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        v.parse::<T>().map_err(|e| Error::invalid(format!("{e}")))
    }
    let t = &mut cfg.train;
    match key {
        "preset" => {} // handled during parsing
        "lambda_dist" => t.lambda_dist = num(value)?,
        "charbonnier_eps" => t.charbonnier_eps = num(value)?,
        "batch_rays" => t.batch_rays = num(value)?,
        "total_steps" => t.total_steps = num(value)?,
        "lr_init" => t.lr_init = num(value)?,
        "lr_final" => t.lr_final = num(value)?,
        "warmup_steps" => t.warmup_steps = num(value)?,
        "grad_clip_norm" => t.grad_clip_norm = num(value)?,
        "samples_per_stage" => {
            t.samples_per_stage = value
                .split(',')
                .map(|s| num::<usize>(s.trim()))
                .collect::<Result<_>>()?;
        }
        "anneal_bias" => t.anneal_bias = num(value)?,
        "dilation_a" => t.dilation_a = num(value)?,
        "dilation_b" => t.dilation_b = num(value)?,
        "seed" => t.seed = num(value)?,
        "prop_depth" => t.prop_depth = num(value)?,
        "prop_width" => t.prop_width = num(value)?,
        "nerf_depth" => t.nerf_depth = num(value)?,
        "nerf_width" => t.nerf_width = num(value)?,
        "bottleneck" => t.bottleneck = num(value)?,
        "color_width" => t.color_width = num(value)?,
        "levels_nerf" => t.levels_nerf = num(value)?,
        "levels_prop" => t.levels_prop = num(value)?,
        "levels_dir" => t.levels_dir = num(value)?,
        "off_axis" => t.off_axis = num(value)?,
        "curve" => {
            t.curve = match value {
                "reciprocal" => DistanceCurve::Reciprocal,
                "logarithmic" => DistanceCurve::Logarithmic,
                "linear" => DistanceCurve::Linear,
                other => return Err(Error::invalid(format!("unknown curve '{other}'"))),
            }
        }
        "weight_floor" => t.weight_floor = num(value)?,
        "dilate_first_level" => t.dilate_first_level = num(value)?,
        "recon_weight" => t.recon_weight = num(value)?,
        "enable_prop_loss" => t.enable_prop_loss = num(value)?,
        "adam_beta1" => t.adam_beta1 = num(value)?,
        "adam_beta2" => t.adam_beta2 = num(value)?,
        "adam_eps" => t.adam_eps = num(value)?,
        "n_cameras" => cfg.n_cameras = num(value)?,
        "image_size" => cfg.image_size = num(value)?,
        "dataset_seed" => cfg.dataset_seed = num(value)?,
        "ring_radius" => cfg.dataset.ring_radius = num(value)?,
        "focal_per_width" => cfg.dataset.focal_per_width = num(value)?,
        "t_near" => cfg.dataset.t_near = num(value)?,
        "t_far" => cfg.dataset.t_far = num(value)?,
        "quadrature_n" => cfg.dataset.quadrature_n = num(value)?,
        "holdout_every" => cfg.dataset.holdout_every = num(value)?,
        "scene" => cfg.scene_path = Some(value.to_string()),
        other => return Err(Error::invalid(format!("unknown config key '{other}'"))),
    }
    Ok(())
}

/// Canonical text rendering of a run config; hashed into checkpoints.
pub fn render_run_config(cfg: &RunConfig) -> String {
    let t = &cfg.train;
    let stage_list =
        t.samples_per_stage.iter().map(|n| n.to_string()).collect::<Vec<_>>().join(",");
    let curve = match t.curve {
        DistanceCurve::Reciprocal => "reciprocal",
        DistanceCurve::Logarithmic => "logarithmic",
        DistanceCurve::Linear => "linear",
    };
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        s.push_str(k);
        s.push_str(" = ");
        s.push_str(&v);
        s.push('\n');
    };
    kv("lambda_dist", format!("{:e}", t.lambda_dist));
    kv("charbonnier_eps", format!("{:e}", t.charbonnier_eps));
    kv("batch_rays", t.batch_rays.to_string());
    kv("total_steps", t.total_steps.to_string());
    kv("lr_init", format!("{:e}", t.lr_init));
    kv("lr_final", format!("{:e}", t.lr_final));
    kv("warmup_steps", t.warmup_steps.to_string());
    kv("grad_clip_norm", format!("{:e}", t.grad_clip_norm));
    kv("samples_per_stage", stage_list);
    kv("anneal_bias", format!("{:e}", t.anneal_bias));
    kv("dilation_a", format!("{:e}", t.dilation_a));
    kv("dilation_b", format!("{:e}", t.dilation_b));
    kv("seed", t.seed.to_string());
    kv("prop_depth", t.prop_depth.to_string());
    kv("prop_width", t.prop_width.to_string());
    kv("nerf_depth", t.nerf_depth.to_string());
    kv("nerf_width", t.nerf_width.to_string());
    kv("bottleneck", t.bottleneck.to_string());
    kv("color_width", t.color_width.to_string());
    kv("levels_nerf", t.levels_nerf.to_string());
    kv("levels_prop", t.levels_prop.to_string());
    kv("levels_dir", t.levels_dir.to_string());
    kv("off_axis", t.off_axis.to_string());
    kv("curve", curve.to_string());
    kv("weight_floor", format!("{:e}", t.weight_floor));
    kv("dilate_first_level", t.dilate_first_level.to_string());
    kv("recon_weight", format!("{:e}", t.recon_weight));
    kv("enable_prop_loss", t.enable_prop_loss.to_string());
    kv("adam_beta1", format!("{:e}", t.adam_beta1));
    kv("adam_beta2", format!("{:e}", t.adam_beta2));
    kv("adam_eps", format!("{:e}", t.adam_eps));
    kv("n_cameras", cfg.n_cameras.to_string());
    kv("image_size", cfg.image_size.to_string());
    kv("dataset_seed", cfg.dataset_seed.to_string());
    kv("ring_radius", format!("{:e}", cfg.dataset.ring_radius));
    kv("focal_per_width", format!("{:e}", cfg.dataset.focal_per_width));
    kv("t_near", format!("{:e}", cfg.dataset.t_near));
    kv("t_far", format!("{:e}", cfg.dataset.t_far));
    kv("quadrature_n", cfg.dataset.quadrature_n.to_string());
    kv("holdout_every", cfg.dataset.holdout_every.to_string());
    if let Some(p) = &cfg.scene_path {
        kv("scene", p.clone());
    }
    s
}

pub fn config_hash(cfg: &RunConfig) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(render_run_config(cfg).as_bytes());
    hasher.finalize().into()
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_MAGIC: &[u8; 8] = b"UNERFCP1";

fn write_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_spec(out: &mut Vec<u8>, spec: &MlpSpec) {
    write_u64(out, spec.depth as u64);
    write_u64(out, spec.width as u64);
    write_u64(out, spec.skip_layers.len() as u64);
    for &s in &spec.skip_layers {
        write_u64(out, s as u64);
    }
    write_u64(out, spec.has_color_head as u64);
    write_u64(out, spec.input_dim as u64);
    write_u64(out, spec.dir_dim as u64);
    write_u64(out, spec.bottleneck as u64);
    write_u64(out, spec.color_width as u64);
}

fn write_values(out: &mut Vec<u8>, values: &[f64]) {
    write_u64(out, values.len() as u64);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    ctx: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::parse(&self.ctx, "truncated checkpoint"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u64()? as usize)
    }

    fn spec(&mut self) -> Result<MlpSpec> {
        let depth = self.usize()?;
        let width = self.usize()?;
        let n_skip = self.usize()?;
        let mut skip_layers = Vec::with_capacity(n_skip);
        for _ in 0..n_skip {
            skip_layers.push(self.usize()?);
        }
        Ok(MlpSpec {
            depth,
            width,
            skip_layers,
            has_color_head: self.u64()? != 0,
            input_dim: self.usize()?,
            dir_dim: self.usize()?,
            bottleneck: self.usize()?,
            color_width: self.usize()?,
        })
    }

    fn values(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Writes a checkpoint: magic, config hash, step, both specs and flat
/// parameter arrays (f64 little-endian). Round-trips bit-exactly.
pub fn write_checkpoint(
    path: &Path,
    prop: &ParamStore,
    nerf: &ParamStore,
    step: usize,
    cfg_hash: &[u8; 32],
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(cfg_hash);
    write_u64(&mut out, step as u64);
    write_spec(&mut out, &prop.spec);
    write_values(&mut out, &prop.values);
    write_spec(&mut out, &nerf.spec);
    write_values(&mut out, &nerf.values);
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a checkpoint back; gradient slots come back zeroed.
pub fn read_checkpoint(path: &Path) -> Result<(ParamStore, ParamStore, usize, [u8; 32])> {
    let data = std::fs::read(path)?;
    let ctx = path.display().to_string();
    let mut r = Reader { data: &data, pos: 0, ctx: ctx.clone() };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::parse(&ctx, "bad checkpoint magic"));
    }
    let mut hash = [0u8; 32];
    hash.copy_from_slice(r.take(32)?);
    let step = r.usize()?;
    let prop_spec = r.spec()?;
    let prop_values = r.values()?;
    let nerf_spec = r.spec()?;
    let nerf_values = r.values()?;

    let mut seed_rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut prop = crate::network::init_params(&prop_spec, &mut seed_rng)?;
    if prop.values.len() != prop_values.len() {
        return Err(Error::parse(&ctx, "proposal parameter count mismatch"));
    }
    prop.values = prop_values;
    prop.zero_grads();
    let mut nerf = crate::network::init_params(&nerf_spec, &mut seed_rng)?;
    if nerf.values.len() != nerf_values.len() {
        return Err(Error::parse(&ctx, "nerf parameter count mismatch"));
    }
    nerf.values = nerf_values;
    nerf.zero_grads();
    Ok((prop, nerf, step, hash))
}

use rand::SeedableRng;

// ---------------------------------------------------------------------------
// Images

/// Binary PPM (P6, 8-bit). Values are clamped to [0,1] and rounded.
pub fn write_ppm(path: &Path, img: &ImageBuffer) -> Result<()> {
    let mut out = Vec::with_capacity(20 + img.pixels.len() * 3);
    out.extend_from_slice(format!("P6\n{} {}\n255\n", img.width, img.height).as_bytes());
    for px in &img.pixels {
        for ch in 0..3 {
            out.push((px[ch].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Plain-text float grid: header, dimensions, then one row of depths per
/// line.
pub fn write_depth_grid(path: &Path, width: usize, height: usize, depths: &[f64]) -> Result<()> {
    if depths.len() != width * height {
        return Err(Error::invalid("depth grid size mismatch"));
    }
    let mut out = String::from("unerf-depth v1\n");
    out.push_str(&format!("{width} {height}\n"));
    for row in depths.chunks(width) {
        let fields: Vec<String> = row.iter().map(|d| format!("{d:.9e}")).collect();
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Histogram debug dump

/// Appends one histogram block: a space-tag comment, the edges line, the
/// weights line.
pub fn write_histogram_block(out: &mut String, label: &str, hist: &WeightHistogram) {
    let space = match hist.space() {
        DistanceSpace::Normalized => "s",
        DistanceSpace::Metric => "t",
    };
    out.push_str(&format!("# {label} space={space}\n"));
    let edges: Vec<String> = hist.edges().iter().map(|e| format!("{e:.17e}")).collect();
    out.push_str(&edges.join(" "));
    out.push('\n');
    let weights: Vec<String> = hist.weights().iter().map(|w| format!("{w:.17e}")).collect();
    out.push_str(&weights.join(" "));
    out.push('\n');
}

/// Parses the debug format back into histogram blocks.
pub fn parse_histogram_blocks(text: &str) -> Result<Vec<(String, WeightHistogram)>> {
    let ctx = "histogram dump";
    let mut out = Vec::new();
    let mut lines = text.lines().peekable();
    while let Some(header) = lines.next() {
        let header = header.trim();
        if header.is_empty() {
            continue;
        }
        if !header.starts_with('#') {
            return Err(Error::parse(ctx, format!("expected '# label space=..' header, got '{header}'")));
        }
        let space = if header.ends_with("space=s") {
            DistanceSpace::Normalized
        } else if header.ends_with("space=t") {
            DistanceSpace::Metric
        } else {
            return Err(Error::parse(ctx, "header missing space tag"));
        };
        let label = header
            .trim_start_matches('#')
            .trim()
            .rsplit_once(" space=")
            .map(|(l, _)| l.to_string())
            .unwrap_or_default();
        let edges: Vec<f64> = lines
            .next()
            .ok_or_else(|| Error::parse(ctx, "missing edges line"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| Error::parse(ctx, format!("{e}"))))
            .collect::<Result<_>>()?;
        let weights: Vec<f64> = lines
            .next()
            .ok_or_else(|| Error::parse(ctx, "missing weights line"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| Error::parse(ctx, format!("{e}"))))
            .collect::<Result<_>>()?;
        out.push((label, WeightHistogram::new(space, edges, weights)?));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Whole-file helpers

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    Ok(std::fs::read(path)?)
}

/// Copies a reader to a byte vector; used by the CLI for stdin configs.
pub fn slurp(mut r: impl Read) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::make_dataset;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    #[test]
    fn pose_file_roundtrip() {
        let scene = SceneOracle::toy();
        let opts = DatasetOptions { quadrature_n: 64, ..DatasetOptions::default() };
        let ds = make_dataset(&scene, 5, 4, &mut ChaCha8Rng::seed_from_u64(1), &opts).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("poses.txt");
        write_pose_file(&path, &ds.poses).unwrap();
        let back = read_pose_file(&path).unwrap();
        assert_eq!(back.intrinsics, ds.poses.intrinsics);
        for (a, b) in back.poses.iter().zip(&ds.poses.poses) {
            assert_eq!(a.rotation, b.rotation);
            assert_eq!(a.position, b.position);
        }
        // Bad header rejected.
        std::fs::write(&path, "nope\n").unwrap();
        assert!(read_pose_file(&path).is_err());
    }

    #[test]
    fn scene_file_roundtrip() {
        let scene = SceneOracle::toy();
        let dir = tempdir().unwrap();
        let path = dir.path().join("scene.txt");
        write_scene_file(&path, &scene).unwrap();
        let back = read_scene_file(&path).unwrap();
        assert_eq!(back, scene);
    }

    #[test]
    fn config_parse_preset_and_overrides() {
        let text = "preset = desk\nbatch_rays = 32\nseed = 99\nsamples_per_stage = 8, 8, 4\nscene = foo.txt\n";
        let cfg = parse_run_config(text, "test").unwrap();
        assert_eq!(cfg.train.batch_rays, 32);
        assert_eq!(cfg.train.seed, 99);
        assert_eq!(cfg.train.samples_per_stage, vec![8, 8, 4]);
        assert_eq!(cfg.scene_path.as_deref(), Some("foo.txt"));
        // Unchanged desk defaults survive.
        assert_eq!(cfg.train.nerf_width, 128);

        assert!(parse_run_config("nonsense_key = 1\n", "test").is_err());
        assert!(parse_run_config("preset = bogus\n", "test").is_err());

        // Canonical rendering reparses to the same config.
        let rendered = render_run_config(&cfg);
        let reparsed = parse_run_config(&rendered, "rendered").unwrap();
        assert_eq!(reparsed, cfg);
        assert_eq!(config_hash(&reparsed), config_hash(&cfg));
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let cfg = RunConfig::default();
        let state = crate::trainer::TrainState::new(&cfg.train).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let hash = config_hash(&cfg);
        write_checkpoint(&path, &state.prop, &state.nerf, 123, &hash).unwrap();
        let (prop, nerf, step, h) = read_checkpoint(&path).unwrap();
        assert_eq!(step, 123);
        assert_eq!(h, hash);
        assert_eq!(prop.values, state.prop.values);
        assert_eq!(nerf.values, state.nerf.values);
        assert_eq!(prop.spec, state.prop.spec);
        assert_eq!(nerf.spec, state.nerf.spec);

        // Writing the same state twice produces identical bytes.
        let path2 = dir.path().join("ckpt2.bin");
        write_checkpoint(&path2, &state.prop, &state.nerf, 123, &hash).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn ppm_and_depth_bytes() {
        let dir = tempdir().unwrap();
        let mut img = ImageBuffer::new(2, 2);
        img.pixels = vec![[0.0, 0.5, 1.0], [1.0, 0.0, 0.0], [0.25, 0.25, 0.25], [2.0, -1.0, 0.5]];
        let path = dir.path().join("img.ppm");
        write_ppm(&path, &img).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n2 2\n255\n"));
        let body = &bytes[b"P6\n2 2\n255\n".len()..];
        assert_eq!(body, &[0, 128, 255, 255, 0, 0, 64, 64, 64, 255, 0, 128]);

        let dpath = dir.path().join("depth.txt");
        write_depth_grid(&dpath, 2, 2, &[1.0, 2.0, 3.0, 4.5]).unwrap();
        let text = std::fs::read_to_string(&dpath).unwrap();
        assert!(text.starts_with("unerf-depth v1\n2 2\n"));
        assert!(write_depth_grid(&dpath, 2, 2, &[1.0]).is_err());
    }

    #[test]
    fn histogram_dump_roundtrip() {
        let h1 = WeightHistogram::new(DistanceSpace::Normalized, vec![0.0, 0.5, 1.0], vec![0.25, 0.5]).unwrap();
        let h2 = WeightHistogram::new(DistanceSpace::Metric, vec![0.3, 1.7], vec![0.9]).unwrap();
        let mut text = String::new();
        write_histogram_block(&mut text, "stage 0", &h1);
        write_histogram_block(&mut text, "final", &h2);
        let blocks = parse_histogram_blocks(&text).unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].0, "stage 0");
        assert_eq!(blocks[0].1, h1);
        assert_eq!(blocks[1].1, h2);
    }
}
