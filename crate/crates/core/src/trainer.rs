//! The hierarchical sampling loop (proposal stages + one NeRF stage), the
//! total loss with its stop-gradient structure, Adam with warmup and
//! log-linear decay, and evaluation.
//!
//! Gradients are computed with the sampled interval edges held fixed: the
//! losses differentiate through density -> weights -> compositing and the
//! regularizers, never through the resampling positions. The proposal loss
//! treats the final histogram as a constant (stop-gradient), so it trains
//! only the proposal network.

use crate::encoding::{dir_features_into, ipe_features_into, EncodingBasis};
use crate::error::{Error, Result};
use crate::geometry::{
    conical_frustum_to_gaussian, s_to_t, warp_gaussian, Contraction, DistanceCurve,
    GaussianSegment, Ray,
};
use crate::histograms::{
    anneal_weights, dilate, dilation_epsilon, distortion_loss_grad, floor_weights, median_depth,
    proposal_loss_grad, resample, weights_from_density_backward, weights_from_density_raw,
    DistanceSpace, ResampleMode, WeightHistogram,
};
use crate::network::{
    init_params, nerf_backward, nerf_forward, proposal_backward, proposal_forward, ForwardCache,
    MlpSpec, ParamStore,
};
use crate::scene::Dataset;
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Scale applied to contracted coordinates before encoding. Contracted
/// points live in a radius-2 ball; scaling by pi/2 stretches that to radius
/// pi so the base frequency covers one period.
pub const CONTRACTED_SCALE: f64 = std::f64::consts::FRAC_PI_2;

/// Rays per parallel work unit. Fixed (not derived from the thread count) so
/// reduction order and results are identical on any machine.
const CHUNK_RAYS: usize = 32;

/// Training hyperparameters and architecture sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_dist: f64,
    pub charbonnier_eps: f64,
    pub batch_rays: usize,
    pub total_steps: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub warmup_steps: usize,
    pub grad_clip_norm: f64,
    pub samples_per_stage: Vec<usize>,
    pub anneal_bias: f64,
    pub dilation_a: f64,
    pub dilation_b: f64,
    pub seed: u64,
    // Architecture.
    pub prop_depth: usize,
    pub prop_width: usize,
    pub nerf_depth: usize,
    pub nerf_width: usize,
    pub bottleneck: usize,
    pub color_width: usize,
    // Encoding.
    pub levels_nerf: usize,
    pub levels_prop: usize,
    pub levels_dir: usize,
    pub off_axis: bool,
    // Distances.
    pub curve: DistanceCurve,
    // Behavior knobs.
    pub weight_floor: f64,
    pub dilate_first_level: bool,
    pub recon_weight: f64,
    pub enable_prop_loss: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl TrainConfig {
    /// Full-scale settings: 250k steps, 2^14-ray batches, stages (64,64,32),
    /// proposal MLP 4x256, NeRF MLP 8x1024.
    pub fn paper() -> Self {
        TrainConfig {
            lambda_dist: 0.01,
            charbonnier_eps: 0.001,
            batch_rays: 1 << 14,
            total_steps: 250_000,
            lr_init: 2e-3,
            lr_final: 2e-5,
            warmup_steps: 512,
            grad_clip_norm: 1e-3,
            samples_per_stage: vec![64, 64, 32],
            anneal_bias: 10.0,
            dilation_a: 0.5,
            dilation_b: 0.0025,
            seed: 0,
            prop_depth: 4,
            prop_width: 256,
            nerf_depth: 8,
            nerf_width: 1024,
            bottleneck: 256,
            color_width: 256,
            levels_nerf: 12,
            levels_prop: 12,
            levels_dir: 4,
            off_axis: true,
            curve: DistanceCurve::Reciprocal,
            weight_floor: 1e-5,
            dilate_first_level: false,
            recon_weight: 1.0,
            enable_prop_loss: true,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-6,
        }
    }

    /// Laptop-scale settings used by the toy-scene experiments: 5000 steps,
    /// 128-ray batches, stages (32,32,16), proposal MLP 2x64, NeRF MLP
    /// 4x128, reduced encoding levels.
    pub fn desk() -> Self {
        TrainConfig {
            batch_rays: 128,
            total_steps: 5000,
            samples_per_stage: vec![32, 32, 16],
            prop_depth: 2,
            prop_width: 64,
            nerf_depth: 4,
            nerf_width: 128,
            bottleneck: 32,
            color_width: 64,
            levels_nerf: 6,
            levels_prop: 4,
            levels_dir: 1,
            ..TrainConfig::paper()
        }
    }

    pub fn basis(&self) -> EncodingBasis {
        if self.off_axis {
            EncodingBasis::off_axis()
        } else {
            EncodingBasis::axis_aligned()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.lambda_dist >= 0.0,
            self.charbonnier_eps > 0.0,
            self.batch_rays > 0,
            self.total_steps > 0,
            self.lr_init > 0.0,
            self.lr_final > 0.0,
            self.grad_clip_norm > 0.0,
            self.anneal_bias > 0.0,
            self.dilation_a >= 0.0,
            self.dilation_b >= 0.0,
            !self.samples_per_stage.is_empty(),
            self.samples_per_stage.iter().all(|&n| n >= 2),
            self.levels_nerf >= 1 && self.levels_prop >= 1 && self.levels_dir >= 1,
        ];
        if positive.iter().any(|ok| !ok) {
            return Err(Error::invalid("train config fields must be positive"));
        }
        Ok(())
    }

    fn prop_spec(&self, basis: &EncodingBasis) -> MlpSpec {
        MlpSpec::proposal(self.prop_depth, self.prop_width, basis.feature_len(self.levels_prop))
    }

    fn nerf_spec(&self, basis: &EncodingBasis) -> MlpSpec {
        MlpSpec::nerf(
            self.nerf_depth,
            self.nerf_width,
            basis.feature_len(self.levels_nerf),
            6 * self.levels_dir,
            self.bottleneck,
            self.color_width,
        )
    }
}

/// Log-linear decay from lr_init to lr_final with a linear 0.1x -> 1x warmup
/// ramp over the first `warmup_steps` steps.
pub fn lr_schedule(n: usize, cfg: &TrainConfig) -> f64 {
    let x = (n as f64 / cfg.total_steps as f64).clamp(0.0, 1.0);
    let base = ((1.0 - x) * cfg.lr_init.ln() + x * cfg.lr_final.ln()).exp();
    let ramp = if cfg.warmup_steps == 0 {
        1.0
    } else {
        0.1 + 0.9 * (n as f64 / cfg.warmup_steps as f64).min(1.0)
    };
    base * ramp
}

/// Charbonnier penalty sqrt(r^2 + eps^2).
pub fn charbonnier(residual: f64, eps: f64) -> f64 {
    (residual * residual + eps * eps).sqrt()
}

/// Rendering mode: deterministic evaluation, or stochastic training with a
/// step (for weight annealing) and a seed deriving per-ray streams.
#[derive(Debug, Clone, Copy)]
pub enum RenderMode {
    Eval,
    Train { step: usize, seed: u64 },
}

/// Per-ray render output: color, metric median depth, and every stage's
/// s-space histogram (proposal stages first, final stage last) for loss
/// computation, plus the final histogram in metric distances.
#[derive(Debug, Clone)]
pub struct RayRender {
    pub rgb: [f64; 3],
    pub median_depth: f64,
    pub stage_hists: Vec<WeightHistogram>,
    pub final_hist_t: WeightHistogram,
}

/// Density/color provider for the hierarchical pipeline: the trained MLPs in
/// production, analytic fields in tests.
pub trait StageField: Sync {
    /// Density for one proposal stage. Returns the activations cache when
    /// the caller will run a backward pass.
    fn proposal(
        &self,
        stage: usize,
        segs: &[GaussianSegment],
        feats: ArrayView2<f64>,
    ) -> Result<(Vec<f64>, Option<ForwardCache>)>;

    /// Density and color for the final stage.
    fn final_stage(
        &self,
        segs: &[GaussianSegment],
        feats: ArrayView2<f64>,
        dir_feats: ArrayView2<f64>,
    ) -> Result<(Vec<f64>, Vec<[f64; 3]>, Option<ForwardCache>)>;
}

/// The production field: proposal + NeRF parameter stores.
pub struct MlpField<'a> {
    pub prop: &'a ParamStore,
    pub nerf: &'a ParamStore,
    pub want_cache: bool,
}

impl StageField for MlpField<'_> {
    fn proposal(
        &self,
        _stage: usize,
        _segs: &[GaussianSegment],
        feats: ArrayView2<f64>,
    ) -> Result<(Vec<f64>, Option<ForwardCache>)> {
        let (tau, cache) = proposal_forward(self.prop, feats)?;
        Ok((tau, self.want_cache.then_some(cache)))
    }

    fn final_stage(
        &self,
        _segs: &[GaussianSegment],
        feats: ArrayView2<f64>,
        dir_feats: ArrayView2<f64>,
    ) -> Result<(Vec<f64>, Vec<[f64; 3]>, Option<ForwardCache>)> {
        let (tau, colors, cache) = nerf_forward(self.nerf, feats, dir_feats)?;
        Ok((tau, colors, self.want_cache.then_some(cache)))
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent per-ray stream so parallel rendering is deterministic
/// whatever the thread schedule.
fn ray_rng(seed: u64, step: usize, ray_id: usize) -> ChaCha8Rng {
    let mixed = splitmix64(seed ^ splitmix64(step as u64 + 1) ^ splitmix64(ray_id as u64).rotate_left(17));
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Recorded per-stage state for one chunk of rays.
struct StageTape {
    s_edges: Vec<Vec<f64>>,
    t_edges: Vec<Vec<f64>>,
    weights: Vec<Vec<f64>>,
    trans: Vec<Vec<f64>>,
    taus: Vec<f64>,
    cache: Option<ForwardCache>,
}

struct ChunkOutput {
    rgbs: Vec<[f64; 3]>,
    depths: Vec<f64>,
    colors: Vec<[f64; 3]>,
    bgs: Vec<[f64; 3]>,
    stages: Vec<StageTape>,
}

/// Interval-edge source: sample them (training/eval), or replay a recorded
/// set, which keeps the loss a fixed differentiable function of the
/// parameters for gradient checks.
enum EdgePlan<'a> {
    Sample,
    Frozen { edges: &'a [Vec<Vec<f64>>], bgs: &'a [[f64; 3]] },
}

fn scaled_segment(seg: &GaussianSegment) -> GaussianSegment {
    GaussianSegment::new_unchecked(
        seg.mean * CONTRACTED_SCALE,
        seg.cov * (CONTRACTED_SCALE * CONTRACTED_SCALE),
    )
}

/// One hierarchical forward pass over a chunk of rays.
fn forward_chunk(
    field: &dyn StageField,
    cfg: &TrainConfig,
    basis: &EncodingBasis,
    rays: &[Ray],
    ray_ids: &[usize],
    mode: RenderMode,
    plan: &EdgePlan,
) -> Result<ChunkOutput> {
    let n_stages = cfg.samples_per_stage.len();
    let nr = rays.len();

    let mut rngs: Vec<Option<ChaCha8Rng>> = match mode {
        RenderMode::Eval => vec![None; nr],
        RenderMode::Train { step, seed } => {
            ray_ids.iter().map(|&id| Some(ray_rng(seed, step, id))).collect()
        }
    };
    let sample_mode = match mode {
        RenderMode::Eval => ResampleMode::Deterministic,
        RenderMode::Train { .. } => ResampleMode::Stratified,
    };
    let (anneal_step, anneal_total) = match mode {
        RenderMode::Eval => (1, 1),
        RenderMode::Train { step, .. } => (step, cfg.total_steps),
    };

    // Backgrounds: random per ray during training, gray at evaluation.
    let bgs: Vec<[f64; 3]> = match plan {
        EdgePlan::Frozen { bgs, .. } => bgs.to_vec(),
        EdgePlan::Sample => rngs
            .iter_mut()
            .map(|r| match r {
                Some(rng) => [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()],
                None => [0.5, 0.5, 0.5],
            })
            .collect(),
    };

    // Stage-0 edges come from resampling the uniform histogram over [0, 1].
    let mut current_edges: Vec<Vec<f64>> = match plan {
        EdgePlan::Frozen { edges, .. } => edges[0].clone(),
        EdgePlan::Sample => {
            let uniform =
                WeightHistogram::new(DistanceSpace::Normalized, vec![0.0, 1.0], vec![1.0])?;
            let source = if cfg.dilate_first_level {
                let eps = dilation_epsilon(1, &cfg.samples_per_stage, cfg.dilation_a, cfg.dilation_b);
                dilate(&uniform, eps)?
            } else {
                uniform
            };
            let mut det_rng = ChaCha8Rng::seed_from_u64(0);
            rays.iter()
                .enumerate()
                .map(|(i, _)| {
                    let rng: &mut dyn rand::RngCore = match rngs[i].as_mut() {
                        Some(r) => r,
                        None => &mut det_rng,
                    };
                    resample(&source, cfg.samples_per_stage[0], sample_mode, rng)
                })
                .collect::<Result<_>>()?
        }
    };

    let mut stages: Vec<StageTape> = Vec::with_capacity(n_stages);
    let mut rgbs = vec![[0.0; 3]; nr];
    let mut depths = vec![0.0; nr];
    let mut final_colors = Vec::new();

    for k in 0..n_stages {
        let is_final = k + 1 == n_stages;
        let nk = cfg.samples_per_stage[k];
        let levels = if is_final { cfg.levels_nerf } else { cfg.levels_prop };
        let flen = basis.feature_len(levels);

        let mut feats = Array2::<f64>::zeros((nr * nk, flen));
        let mut segs: Vec<GaussianSegment> = Vec::with_capacity(nr * nk);
        let mut t_edges_all: Vec<Vec<f64>> = Vec::with_capacity(nr);
        for (i, ray) in rays.iter().enumerate() {
            let se = &current_edges[i];
            debug_assert_eq!(se.len(), nk + 1);
            let mut te = Vec::with_capacity(nk + 1);
            for &s in se {
                te.push(s_to_t(s, ray.t_near, ray.t_far, cfg.curve)?);
            }
            // Resampled edges can tie at f64 resolution; keep t strictly
            // increasing for the frustum moments.
            for j in 1..te.len() {
                if te[j] <= te[j - 1] {
                    te[j] = te[j - 1] * (1.0 + 1e-12);
                }
            }
            for j in 0..nk {
                let seg = conical_frustum_to_gaussian(ray, te[j], te[j + 1])?;
                let contracted = warp_gaussian(&seg, &Contraction);
                let row = feats.row_mut(i * nk + j);
                ipe_features_into(
                    &scaled_segment(&contracted),
                    basis,
                    levels,
                    row.into_slice().expect("contiguous row"),
                );
                segs.push(seg);
            }
            t_edges_all.push(te);
        }

        if !is_final {
            let (taus, cache) = field.proposal(k, &segs, feats.view())?;
            let mut weights = Vec::with_capacity(nr);
            let mut trans = Vec::with_capacity(nr);
            for i in 0..nr {
                let (w, t) = weights_from_density_raw(&taus[i * nk..(i + 1) * nk], &t_edges_all[i]);
                weights.push(w);
                trans.push(t);
            }

            let next_edges: Vec<Vec<f64>> = match plan {
                EdgePlan::Frozen { edges, .. } => edges[k + 1].clone(),
                EdgePlan::Sample => {
                    let eps = dilation_epsilon(
                        k + 2,
                        &cfg.samples_per_stage,
                        cfg.dilation_a,
                        cfg.dilation_b,
                    );
                    let mut out = Vec::with_capacity(nr);
                    for i in 0..nr {
                        let annealed =
                            anneal_weights(&weights[i], anneal_step, anneal_total, cfg.anneal_bias)?;
                        let floored = floor_weights(&annealed, cfg.weight_floor);
                        let hist = WeightHistogram::new(
                            DistanceSpace::Normalized,
                            current_edges[i].clone(),
                            floored,
                        )?;
                        let dilated = dilate(&hist, eps)?;
                        let mut det_rng = ChaCha8Rng::seed_from_u64(0);
                        let rng: &mut dyn rand::RngCore = match rngs[i].as_mut() {
                            Some(r) => r,
                            None => &mut det_rng,
                        };
                        out.push(resample(&dilated, cfg.samples_per_stage[k + 1], sample_mode, rng)?);
                    }
                    out
                }
            };

            stages.push(StageTape {
                s_edges: std::mem::replace(&mut current_edges, next_edges),
                t_edges: t_edges_all,
                weights,
                trans,
                taus,
                cache,
            });
        } else {
            let dir_len = 6 * cfg.levels_dir;
            let mut dirf = Array2::<f64>::zeros((nr * nk, dir_len));
            for (i, ray) in rays.iter().enumerate() {
                let mut row0 = vec![0.0; dir_len];
                dir_features_into(ray.direction, cfg.levels_dir, &mut row0);
                for j in 0..nk {
                    dirf.row_mut(i * nk + j)
                        .into_slice()
                        .expect("contiguous row")
                        .copy_from_slice(&row0);
                }
            }
            let (taus, colors, cache) = field.final_stage(&segs, feats.view(), dirf.view())?;
            let mut weights = Vec::with_capacity(nr);
            let mut trans = Vec::with_capacity(nr);
            for i in 0..nr {
                let (w, t) = weights_from_density_raw(&taus[i * nk..(i + 1) * nk], &t_edges_all[i]);
                let mut rgb = [0.0; 3];
                let mut wsum = 0.0;
                for j in 0..nk {
                    for ch in 0..3 {
                        rgb[ch] += w[j] * colors[i * nk + j][ch];
                    }
                    wsum += w[j];
                }
                for ch in 0..3 {
                    rgb[ch] += (1.0 - wsum) * bgs[i][ch];
                }
                rgbs[i] = rgb;
                let t_hist = WeightHistogram::new_unchecked(
                    DistanceSpace::Metric,
                    t_edges_all[i].clone(),
                    w.clone(),
                );
                depths[i] = median_depth(&t_hist);
                weights.push(w);
                trans.push(t);
            }
            final_colors = colors;
            stages.push(StageTape {
                s_edges: std::mem::take(&mut current_edges),
                t_edges: t_edges_all,
                weights,
                trans,
                taus,
                cache,
            });
        }
    }

    Ok(ChunkOutput { rgbs, depths, colors: final_colors, bgs, stages })
}

/// Loss values accumulated over a batch; `total` is the optimized scalar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    /// Mean over rays of the channel-summed Charbonnier penalty.
    pub recon: f64,
    /// Mean over rays of the final-stage distortion.
    pub distortion: f64,
    /// Mean over rays of the summed per-stage proposal losses.
    pub proposal: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn assemble(cfg: &TrainConfig, recon: f64, distortion: f64, proposal: f64) -> Self {
        let total = cfg.recon_weight * recon
            + cfg.lambda_dist * distortion
            + if cfg.enable_prop_loss { proposal } else { 0.0 };
        LossBreakdown { recon, distortion, proposal, total }
    }
}

/// Per-chunk loss sums plus gradient contributions.
struct ChunkGrads {
    recon_sum: f64,
    dist_sum: f64,
    prop_sum: f64,
    se_sum: f64,
    grads_prop: Vec<f64>,
    grads_nerf: Vec<f64>,
}

/// Reverse pass over one chunk. `scale` is 1/batch so the reduced gradients
/// correspond to the ray-mean loss.
fn backward_chunk(
    prop: &ParamStore,
    nerf: &ParamStore,
    cfg: &TrainConfig,
    out: &ChunkOutput,
    gts: &[[f64; 3]],
    scale: f64,
    stop_grad_target: Option<&[Vec<f64>]>,
) -> Result<ChunkGrads> {
    let n_stages = cfg.samples_per_stage.len();
    let nr = out.rgbs.len();
    let nf = cfg.samples_per_stage[n_stages - 1];
    let final_stage = &out.stages[n_stages - 1];

    let mut grads_prop = vec![0.0; prop.len()];
    let mut grads_nerf = vec![0.0; nerf.len()];
    let mut d_tau_final = vec![0.0; nr * nf];
    let mut d_colors = vec![[0.0; 3]; nr * nf];
    let mut recon_sum = 0.0;
    let mut dist_sum = 0.0;
    let mut se_sum = 0.0;

    for i in 0..nr {
        let mut d_rgb = [0.0; 3];
        for ch in 0..3 {
            let r = out.rgbs[i][ch] - gts[i][ch];
            recon_sum += charbonnier(r, cfg.charbonnier_eps);
            se_sum += r * r;
            d_rgb[ch] =
                cfg.recon_weight * scale * r / charbonnier(r, cfg.charbonnier_eps);
        }

        let w = &final_stage.weights[i];
        let mut d_w = vec![0.0; nf];
        for j in 0..nf {
            for ch in 0..3 {
                d_w[j] += d_rgb[ch] * (out.colors[i * nf + j][ch] - out.bgs[i][ch]);
                d_colors[i * nf + j][ch] = w[j] * d_rgb[ch];
            }
        }

        let s_hist = WeightHistogram::new_unchecked(
            DistanceSpace::Normalized,
            final_stage.s_edges[i].clone(),
            w.clone(),
        );
        let (dist, d_dist) = distortion_loss_grad(&s_hist)?;
        dist_sum += dist;
        for j in 0..nf {
            d_w[j] += cfg.lambda_dist * scale * d_dist[j];
        }

        weights_from_density_backward(
            &final_stage.taus[i * nf..(i + 1) * nf],
            &final_stage.t_edges[i],
            w,
            &final_stage.trans[i],
            &d_w,
            &mut d_tau_final[i * nf..(i + 1) * nf],
        );
    }

    let cache = final_stage.cache.as_ref().expect("training pass records caches");
    nerf_backward(nerf, cache, &d_tau_final, &d_colors, &mut grads_nerf, None);

    // Proposal stages: the final histogram enters as a constant
    // (stop-gradient), so these losses only reach the proposal parameters.
    let mut prop_sum = 0.0;
    for k in 0..n_stages - 1 {
        let stage = &out.stages[k];
        let nk = cfg.samples_per_stage[k];
        let mut d_tau = vec![0.0; nr * nk];
        for i in 0..nr {
            let target_w = match stop_grad_target {
                Some(tw) => tw[i].clone(),
                None => final_stage.weights[i].clone(),
            };
            let final_hist = WeightHistogram::new_unchecked(
                DistanceSpace::Normalized,
                final_stage.s_edges[i].clone(),
                target_w,
            );
            let stage_hist = WeightHistogram::new_unchecked(
                DistanceSpace::Normalized,
                stage.s_edges[i].clone(),
                stage.weights[i].clone(),
            );
            let (loss_k, d_w_hat) = proposal_loss_grad(&final_hist, &stage_hist)?;
            prop_sum += loss_k;
            if cfg.enable_prop_loss {
                let scaled: Vec<f64> = d_w_hat.iter().map(|g| g * scale).collect();
                weights_from_density_backward(
                    &stage.taus[i * nk..(i + 1) * nk],
                    &stage.t_edges[i],
                    &stage.weights[i],
                    &stage.trans[i],
                    &scaled,
                    &mut d_tau[i * nk..(i + 1) * nk],
                );
            }
        }
        let cache = stage.cache.as_ref().expect("training pass records caches");
        proposal_backward(prop, cache, &d_tau, &mut grads_prop, None);
    }

    Ok(ChunkGrads { recon_sum, dist_sum, prop_sum, se_sum, grads_prop, grads_nerf })
}

fn tape_to_renders(cfg: &TrainConfig, out: &ChunkOutput) -> Vec<RayRender> {
    let n_stages = cfg.samples_per_stage.len();
    let nr = out.rgbs.len();
    (0..nr)
        .map(|i| {
            let stage_hists: Vec<WeightHistogram> = out
                .stages
                .iter()
                .map(|st| {
                    WeightHistogram::new_unchecked(
                        DistanceSpace::Normalized,
                        st.s_edges[i].clone(),
                        st.weights[i].clone(),
                    )
                })
                .collect();
            let fs = &out.stages[n_stages - 1];
            let final_hist_t = WeightHistogram::new_unchecked(
                DistanceSpace::Metric,
                fs.t_edges[i].clone(),
                fs.weights[i].clone(),
            );
            RayRender {
                rgb: out.rgbs[i],
                median_depth: out.depths[i],
                stage_hists,
                final_hist_t,
            }
        })
        .collect()
}

/// Renders rays against an arbitrary stage field, in parallel deterministic
/// chunks.
pub fn render_rays_with(
    field: &dyn StageField,
    cfg: &TrainConfig,
    rays: &[Ray],
    mode: RenderMode,
) -> Result<Vec<RayRender>> {
    cfg.validate()?;
    let basis = cfg.basis();
    let chunks: Vec<(usize, &[Ray])> = rays
        .chunks(CHUNK_RAYS)
        .enumerate()
        .map(|(ci, c)| (ci * CHUNK_RAYS, c))
        .collect();
    let results: Vec<Result<Vec<RayRender>>> = chunks
        .into_par_iter()
        .map(|(start, chunk)| {
            let ids: Vec<usize> = (start..start + chunk.len()).collect();
            let out = forward_chunk(field, cfg, &basis, chunk, &ids, mode, &EdgePlan::Sample)?;
            Ok(tape_to_renders(cfg, &out))
        })
        .collect();
    let mut renders = Vec::with_capacity(rays.len());
    for r in results {
        renders.extend(r?);
    }
    Ok(renders)
}

/// Renders rays with the trained networks.
pub fn render_rays(
    prop: &ParamStore,
    nerf: &ParamStore,
    cfg: &TrainConfig,
    rays: &[Ray],
    mode: RenderMode,
) -> Result<Vec<RayRender>> {
    let field = MlpField { prop, nerf, want_cache: false };
    render_rays_with(&field, cfg, rays, mode)
}

/// Renders a single ray; returns its color, median depth, and all stage
/// histograms.
pub fn render_ray(
    ray: &Ray,
    prop: &ParamStore,
    nerf: &ParamStore,
    cfg: &TrainConfig,
    mode: RenderMode,
) -> Result<RayRender> {
    Ok(render_rays(prop, nerf, cfg, std::slice::from_ref(ray), mode)?.remove(0))
}

/// Recomputes the batch loss from recorded renders; the forward-only
/// counterpart of the training objective.
pub fn total_loss(renders: &[RayRender], gts: &[[f64; 3]], cfg: &TrainConfig) -> Result<LossBreakdown> {
    if renders.len() != gts.len() {
        return Err(Error::invalid(format!(
            "batch size mismatch: {} renders vs {} ground-truth colors",
            renders.len(),
            gts.len()
        )));
    }
    if renders.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let mut recon = 0.0;
    let mut dist = 0.0;
    let mut prop = 0.0;
    for (render, gt) in renders.iter().zip(gts) {
        for ch in 0..3 {
            recon += charbonnier(render.rgb[ch] - gt[ch], cfg.charbonnier_eps);
        }
        let final_hist = render.stage_hists.last().expect("at least one stage");
        dist += crate::histograms::distortion_loss(final_hist)?;
        for stage_hist in &render.stage_hists[..render.stage_hists.len() - 1] {
            prop += crate::histograms::proposal_loss(final_hist, stage_hist)?;
        }
    }
    let n = renders.len() as f64;
    Ok(LossBreakdown::assemble(cfg, recon / n, dist / n, prop / n))
}

/// A recorded batch with its sampled interval edges and backgrounds held
/// fixed, so the loss becomes a deterministic differentiable function of the
/// network parameters (exactly the function the training step
/// differentiates).
#[derive(Debug, Clone)]
pub struct FrozenBatch {
    pub rays: Vec<Ray>,
    pub gts: Vec<[f64; 3]>,
    pub bgs: Vec<[f64; 3]>,
    /// `edges[stage][ray]` in s-space.
    pub edges: Vec<Vec<Vec<f64>>>,
    /// Final-stage weights recorded at freeze time: the stop-gradient
    /// target the proposal losses see as a constant.
    pub target_weights: Vec<Vec<f64>>,
}

/// Runs train-mode sampling once and captures the edges and backgrounds.
pub fn record_frozen_batch(
    prop: &ParamStore,
    nerf: &ParamStore,
    cfg: &TrainConfig,
    rays: &[Ray],
    gts: &[[f64; 3]],
    step: usize,
    seed: u64,
) -> Result<FrozenBatch> {
    let basis = cfg.basis();
    let field = MlpField { prop, nerf, want_cache: false };
    let ids: Vec<usize> = (0..rays.len()).collect();
    let out = forward_chunk(
        &field,
        cfg,
        &basis,
        rays,
        &ids,
        RenderMode::Train { step, seed },
        &EdgePlan::Sample,
    )?;
    let edges: Vec<Vec<Vec<f64>>> = out.stages.iter().map(|st| st.s_edges.clone()).collect();
    let target_weights = out.stages.last().unwrap().weights.clone();
    Ok(FrozenBatch { rays: rays.to_vec(), gts: gts.to_vec(), bgs: out.bgs, edges, target_weights })
}

/// Total loss on a frozen batch (forward only).
pub fn frozen_loss(
    prop: &ParamStore,
    nerf: &ParamStore,
    cfg: &TrainConfig,
    frozen: &FrozenBatch,
) -> Result<LossBreakdown> {
    let basis = cfg.basis();
    let field = MlpField { prop, nerf, want_cache: false };
    let ids: Vec<usize> = (0..frozen.rays.len()).collect();
    let out = forward_chunk(
        &field,
        cfg,
        &basis,
        &frozen.rays,
        &ids,
        RenderMode::Eval,
        &EdgePlan::Frozen { edges: &frozen.edges, bgs: &frozen.bgs },
    )?;
    let renders = tape_to_renders(cfg, &out);
    // Recompute against the frozen backgrounds; the proposal term sees the
    // recorded final histogram (the stop-gradient target), not the live one.
    let mut recon = 0.0;
    let mut dist = 0.0;
    let mut prop_l = 0.0;
    for (i, render) in renders.iter().enumerate() {
        for ch in 0..3 {
            recon += charbonnier(render.rgb[ch] - frozen.gts[i][ch], cfg.charbonnier_eps);
        }
        let final_hist = render.stage_hists.last().unwrap();
        dist += crate::histograms::distortion_loss(final_hist)?;
        let target = WeightHistogram::new_unchecked(
            DistanceSpace::Normalized,
            final_hist.edges().to_vec(),
            frozen.target_weights[i].clone(),
        );
        for stage_hist in &render.stage_hists[..render.stage_hists.len() - 1] {
            prop_l += crate::histograms::proposal_loss(&target, stage_hist)?;
        }
    }
    let n = frozen.rays.len() as f64;
    Ok(LossBreakdown::assemble(cfg, recon / n, dist / n, prop_l / n))
}

/// Loss plus analytic gradients on a frozen batch; identical math to
/// [`train_step`]'s inner pass.
pub fn frozen_grads(
    prop: &ParamStore,
    nerf: &ParamStore,
    cfg: &TrainConfig,
    frozen: &FrozenBatch,
) -> Result<(LossBreakdown, Vec<f64>, Vec<f64>)> {
    let basis = cfg.basis();
    let field = MlpField { prop, nerf, want_cache: true };
    let ids: Vec<usize> = (0..frozen.rays.len()).collect();
    let out = forward_chunk(
        &field,
        cfg,
        &basis,
        &frozen.rays,
        &ids,
        RenderMode::Eval,
        &EdgePlan::Frozen { edges: &frozen.edges, bgs: &frozen.bgs },
    )?;
    let scale = 1.0 / frozen.rays.len() as f64;
    let sums = backward_chunk(prop, nerf, cfg, &out, &frozen.gts, scale, Some(&frozen.target_weights))?;
    let n = frozen.rays.len() as f64;
    let loss = LossBreakdown::assemble(cfg, sums.recon_sum / n, sums.dist_sum / n, sums.prop_sum / n);
    Ok((loss, sums.grads_prop, sums.grads_nerf))
}

/// First/second Adam moments for one parameter store.
#[derive(Debug, Clone)]
struct AdamMoments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamMoments {
    fn new(len: usize) -> Self {
        AdamMoments { m: vec![0.0; len], v: vec![0.0; len] }
    }

    fn apply(&mut self, cfg: &TrainConfig, t: usize, lr: f64, values: &mut [f64], grads: &[f64]) {
        let b1 = cfg.adam_beta1;
        let b2 = cfg.adam_beta2;
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        for p in 0..values.len() {
            self.m[p] = b1 * self.m[p] + (1.0 - b1) * grads[p];
            self.v[p] = b2 * self.v[p] + (1.0 - b2) * grads[p] * grads[p];
            let mhat = self.m[p] / bc1;
            let vhat = self.v[p] / bc2;
            values[p] -= lr * mhat / (vhat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Step counter, both parameter stores, Adam moments, and the batch RNG.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub prop: ParamStore,
    pub nerf: ParamStore,
    adam_prop: AdamMoments,
    adam_nerf: AdamMoments,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let basis = cfg.basis();
        let prop = init_params(&cfg.prop_spec(&basis), &mut ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 1)))?;
        let nerf = init_params(&cfg.nerf_spec(&basis), &mut ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed ^ 2)))?;
        let adam_prop = AdamMoments::new(prop.len());
        let adam_nerf = AdamMoments::new(nerf.len());
        Ok(TrainState {
            step: 0,
            prop,
            nerf,
            adam_prop,
            adam_nerf,
            rng: ChaCha8Rng::seed_from_u64(splitmix64(cfg.seed)),
        })
    }
}

/// Per-step report.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    /// PSNR of the raw batch reconstruction, for logging.
    pub batch_psnr: f64,
}

/// One optimization step: forward, loss, backward, joint global-norm clip,
/// Adam update. Aborts with diagnostics if the loss turns non-finite.
pub fn train_step(
    state: &mut TrainState,
    rays: &[Ray],
    gts: &[[f64; 3]],
    cfg: &TrainConfig,
) -> Result<StepStats> {
    if rays.len() != gts.len() || rays.is_empty() {
        return Err(Error::invalid("ray/ground-truth batch mismatch"));
    }
    let basis = cfg.basis();
    let scale = 1.0 / rays.len() as f64;
    let mode = RenderMode::Train { step: state.step, seed: cfg.seed };

    let chunk_results: Vec<Result<ChunkGrads>> = rays
        .par_chunks(CHUNK_RAYS)
        .zip(gts.par_chunks(CHUNK_RAYS))
        .enumerate()
        .map(|(ci, (rc, gc))| {
            let field = MlpField { prop: &state.prop, nerf: &state.nerf, want_cache: true };
            let start = ci * CHUNK_RAYS;
            let ids: Vec<usize> = (start..start + rc.len()).collect();
            let out = forward_chunk(&field, cfg, &basis, rc, &ids, mode, &EdgePlan::Sample)?;
            backward_chunk(&state.prop, &state.nerf, cfg, &out, gc, scale, None)
        })
        .collect();

    // Fixed-order reduction keeps results identical across thread schedules.
    let mut grads_prop = vec![0.0; state.prop.len()];
    let mut grads_nerf = vec![0.0; state.nerf.len()];
    let mut recon_sum = 0.0;
    let mut dist_sum = 0.0;
    let mut prop_sum = 0.0;
    let mut se_sum = 0.0;
    for res in chunk_results {
        let c = res?;
        for (a, b) in grads_prop.iter_mut().zip(&c.grads_prop) {
            *a += b;
        }
        for (a, b) in grads_nerf.iter_mut().zip(&c.grads_nerf) {
            *a += b;
        }
        recon_sum += c.recon_sum;
        dist_sum += c.dist_sum;
        prop_sum += c.prop_sum;
        se_sum += c.se_sum;
    }

    let n = rays.len() as f64;
    let loss = LossBreakdown::assemble(cfg, recon_sum / n, dist_sum / n, prop_sum / n);
    if !loss.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: state.step,
            diagnostics: format!(
                "recon={} dist={} prop={} |prop params|={:.3e} |nerf params|={:.3e}",
                loss.recon,
                loss.distortion,
                loss.proposal,
                norm(&state.prop.values),
                norm(&state.nerf.values)
            ),
        });
    }

    // Joint global-norm clip across both parameter stores.
    let grad_norm = (grads_prop.iter().chain(grads_nerf.iter()).map(|g| g * g).sum::<f64>()).sqrt();
    let clipped = grad_norm > cfg.grad_clip_norm;
    if clipped {
        let s = cfg.grad_clip_norm / grad_norm;
        grads_prop.iter_mut().for_each(|g| *g *= s);
        grads_nerf.iter_mut().for_each(|g| *g *= s);
    }

    let lr = lr_schedule(state.step, cfg);
    let t = state.step + 1;
    state.adam_prop.apply(cfg, t, lr, &mut state.prop.values, &grads_prop);
    state.adam_nerf.apply(cfg, t, lr, &mut state.nerf.values, &grads_nerf);
    state.prop.grads.copy_from_slice(&grads_prop);
    state.nerf.grads.copy_from_slice(&grads_nerf);
    state.step += 1;

    let mse = se_sum / (3.0 * n);
    Ok(StepStats { loss, lr, grad_norm, clipped, batch_psnr: psnr_from_mse(mse) })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// PSNR in dB; infinite for an exact reconstruction.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Image-quality metrics over a pixel set.
#[derive(Debug, Clone, Copy)]
pub struct Metrics {
    pub mse: f64,
    pub psnr: f64,
}

/// Renders the given cameras in evaluation mode and reports PSNR/MSE against
/// the dataset images.
pub fn evaluate(
    prop: &ParamStore,
    nerf: &ParamStore,
    cfg: &TrainConfig,
    dataset: &Dataset,
    camera_indices: &[usize],
) -> Result<Metrics> {
    let mut se = 0.0;
    let mut count = 0usize;
    for &cam in camera_indices {
        let rays = dataset.camera_rays(cam)?;
        let renders = render_rays(prop, nerf, cfg, &rays, RenderMode::Eval)?;
        for (render, gt) in renders.iter().zip(&dataset.images[cam].pixels) {
            for ch in 0..3 {
                let r = render.rgb[ch] - gt[ch];
                se += r * r;
            }
            count += 1;
        }
    }
    let mse = se / (3.0 * count as f64);
    Ok(Metrics { mse, psnr: psnr_from_mse(mse) })
}

/// Held-out statistics used by the desk-scale experiments: PSNR, mean
/// final-histogram distortion, and the fraction of final intervals whose
/// weight is covered by the last proposal histogram's overlap bound within
/// 0.05.
#[derive(Debug, Clone, Copy)]
pub struct HeldoutReport {
    pub psnr: f64,
    pub mse: f64,
    pub mean_distortion: f64,
    pub envelope_fraction: f64,
}

pub fn heldout_report(
    prop: &ParamStore,
    nerf: &ParamStore,
    cfg: &TrainConfig,
    dataset: &Dataset,
) -> Result<HeldoutReport> {
    let mut se = 0.0;
    let mut count = 0usize;
    let mut dist_sum = 0.0;
    let mut rays_total = 0usize;
    let mut envelope_ok = 0usize;
    let mut envelope_all = 0usize;
    for &cam in &dataset.test_indices {
        let rays = dataset.camera_rays(cam)?;
        let renders = render_rays(prop, nerf, cfg, &rays, RenderMode::Eval)?;
        for (render, gt) in renders.iter().zip(&dataset.images[cam].pixels) {
            for ch in 0..3 {
                let r = render.rgb[ch] - gt[ch];
                se += r * r;
            }
            count += 1;
            let final_hist = render.stage_hists.last().unwrap();
            dist_sum += crate::histograms::distortion_loss(final_hist)?;
            rays_total += 1;
            let last_prop = &render.stage_hists[render.stage_hists.len() - 2];
            for i in 0..final_hist.len() {
                let b = crate::histograms::bound(
                    last_prop,
                    final_hist.edges()[i],
                    final_hist.edges()[i + 1],
                );
                if b >= final_hist.weights()[i] - 0.05 {
                    envelope_ok += 1;
                }
                envelope_all += 1;
            }
        }
    }
    let mse = se / (3.0 * count as f64);
    Ok(HeldoutReport {
        psnr: psnr_from_mse(mse),
        mse,
        mean_distortion: dist_sum / rays_total as f64,
        envelope_fraction: envelope_ok as f64 / envelope_all as f64,
    })
}

/// Runs the full training loop on a dataset, writing one line-delimited
/// record per step to `log`.
pub fn fit(cfg: &TrainConfig, dataset: &Dataset, log: &mut dyn std::io::Write) -> Result<TrainState> {
    let mut state = TrainState::new(cfg)?;
    let intr = dataset.poses.intrinsics;
    for _ in 0..cfg.total_steps {
        let mut rays = Vec::with_capacity(cfg.batch_rays);
        let mut gts = Vec::with_capacity(cfg.batch_rays);
        for _ in 0..cfg.batch_rays {
            let cam = dataset.train_indices[state.rng.gen_range(0..dataset.train_indices.len())];
            let px = state.rng.gen_range(0..intr.width);
            let py = state.rng.gen_range(0..intr.height);
            rays.push(crate::geometry::generate_ray(
                &dataset.poses.poses[cam],
                &intr,
                px as f64 + 0.5,
                py as f64 + 0.5,
                dataset.bounds,
            )?);
            gts.push(dataset.images[cam].at(px, py));
        }
        let stats = train_step(&mut state, &rays, &gts, cfg)?;
        writeln!(
            log,
            "step={} total={:.12e} recon={:.12e} dist={:.12e} prop={:.12e} lr={:.12e} psnr={:.6}",
            state.step, stats.loss.total, stats.loss.recon, stats.loss.distortion,
            stats.loss.proposal, stats.lr, stats.batch_psnr
        )?;
    }
    Ok(state)
}
