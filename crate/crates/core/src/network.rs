//! Proposal and NeRF multilayer perceptrons with exact reverse-mode
//! gradients.
//!
//! Parameters live in a flat array with named segments so the optimizer,
//! checkpointing, and gradient checks all see one contiguous vector. The
//! backward passes are hand-written adjoints of the fixed forward graphs;
//! generic autodiff is out of scope.
//!
//! Conventions: ReLU trunk activations, softplus density head, sigmoid color
//! head. The ReLU subgradient at exactly zero input is zero.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

/// Density-head bias at initialization; softplus(-2.25) is roughly 0.1 per
/// unit length, keeping fresh networks nearly transparent.
pub const DENSITY_BIAS_INIT: f64 = -2.25;

/// Numerically stable softplus.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of softplus.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Architecture description for one MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    /// Trunk layer count.
    pub depth: usize,
    /// Trunk hidden units.
    pub width: usize,
    /// Trunk layers whose input is re-concatenated with the network input.
    pub skip_layers: Vec<usize>,
    /// Whether the network carries the bottleneck + view-direction color
    /// branch in addition to the density head.
    pub has_color_head: bool,
    /// Width of the positional feature input.
    pub input_dim: usize,
    /// Width of the view-direction features (color head only).
    pub dir_dim: usize,
    /// Bottleneck vector width feeding the color branch.
    pub bottleneck: usize,
    /// Hidden width of the one-hidden-layer color branch.
    pub color_width: usize,
}

impl MlpSpec {
    pub fn proposal(depth: usize, width: usize, input_dim: usize) -> Self {
        MlpSpec {
            depth,
            width,
            skip_layers: vec![],
            has_color_head: false,
            input_dim,
            dir_dim: 0,
            bottleneck: 0,
            color_width: 0,
        }
    }

    /// NeRF spec with the skip connection at the trunk midpoint.
    pub fn nerf(depth: usize, width: usize, input_dim: usize, dir_dim: usize, bottleneck: usize, color_width: usize) -> Self {
        let skip_layers = if depth >= 2 { vec![depth / 2] } else { vec![] };
        MlpSpec {
            depth,
            width,
            skip_layers,
            has_color_head: true,
            input_dim,
            dir_dim,
            bottleneck,
            color_width,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.depth < 1 || self.width < 1 || self.input_dim < 1 {
            return Err(Error::invalid("MLP depth, width and input_dim must be >= 1"));
        }
        if self.skip_layers.iter().any(|&l| l == 0 || l >= self.depth) {
            return Err(Error::invalid("skip layers must lie strictly inside the trunk"));
        }
        if self.has_color_head && (self.bottleneck < 1 || self.color_width < 1) {
            return Err(Error::invalid("color head needs bottleneck and color_width >= 1"));
        }
        Ok(())
    }

    /// Input width of trunk layer `i` (re-concatenation included).
    fn layer_input_dim(&self, i: usize) -> usize {
        if i == 0 {
            self.input_dim
        } else if self.skip_layers.contains(&i) {
            self.width + self.input_dim
        } else {
            self.width
        }
    }
}

#[derive(Debug, Clone)]
struct Segment {
    name: String,
    offset: usize,
    rows: usize,
    cols: usize,
}

/// Flat, named parameter storage with a parallel gradient array.
#[derive(Debug, Clone)]
pub struct ParamStore {
    pub spec: MlpSpec,
    segments: Vec<Segment>,
    pub values: Vec<f64>,
    pub grads: Vec<f64>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Named segment lookup, mostly for tests and diagnostics.
    pub fn segment(&self, name: &str) -> Option<(&[f64], (usize, usize))> {
        self.segments.iter().find(|s| s.name == name).map(|s| {
            (&self.values[s.offset..s.offset + s.rows * s.cols], (s.rows, s.cols))
        })
    }

    fn view<'a>(values: &'a [f64], seg: &Segment) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((seg.rows, seg.cols), &values[seg.offset..seg.offset + seg.rows * seg.cols])
            .expect("segment shape")
    }

    fn seg(&self, idx: usize) -> &Segment {
        &self.segments[idx]
    }
}

fn layout(spec: &MlpSpec) -> Vec<Segment> {
    let mut segs = Vec::new();
    let mut offset = 0usize;
    let mut push = |name: String, rows: usize, cols: usize, offset: &mut usize| {
        segs.push(Segment { name, offset: *offset, rows, cols });
        *offset += rows * cols;
    };
    for i in 0..spec.depth {
        push(format!("trunk{i}.w"), spec.layer_input_dim(i), spec.width, &mut offset);
        push(format!("trunk{i}.b"), 1, spec.width, &mut offset);
    }
    push("density.w".into(), spec.width, 1, &mut offset);
    push("density.b".into(), 1, 1, &mut offset);
    if spec.has_color_head {
        push("bottleneck.w".into(), spec.width, spec.bottleneck, &mut offset);
        push("bottleneck.b".into(), 1, spec.bottleneck, &mut offset);
        push("color0.w".into(), spec.bottleneck + spec.dir_dim, spec.color_width, &mut offset);
        push("color0.b".into(), 1, spec.color_width, &mut offset);
        push("color1.w".into(), spec.color_width, 3, &mut offset);
        push("color1.b".into(), 1, 3, &mut offset);
    }
    segs
}

/// Initializes parameters: weights from a fan-in-scaled uniform distribution,
/// biases zero, density bias offset so fresh densities are small.
pub fn init_params(spec: &MlpSpec, rng: &mut impl Rng) -> Result<ParamStore> {
    spec.validate()?;
    let segments = layout(spec);
    let total: usize = segments.iter().map(|s| s.rows * s.cols).sum();
    let mut values = vec![0.0; total];
    for seg in &segments {
        if seg.name.ends_with(".w") {
            let limit = (6.0 / seg.rows as f64).sqrt();
            for v in values[seg.offset..seg.offset + seg.rows * seg.cols].iter_mut() {
                *v = rng.gen_range(-limit..limit);
            }
        } else if seg.name == "density.b" {
            values[seg.offset] = DENSITY_BIAS_INIT;
        }
    }
    Ok(ParamStore { spec: spec.clone(), segments, values, grads: vec![0.0; total] })
}

/// Recorded activations from a forward pass, consumed by the matching
/// backward pass.
#[derive(Debug)]
pub struct ForwardCache {
    /// Input actually fed to each trunk layer (skip concatenation applied).
    layer_inputs: Vec<Array2<f64>>,
    /// Post-ReLU output of each trunk layer; doubles as the ReLU mask.
    layer_outputs: Vec<Array2<f64>>,
    density_raw: Array1<f64>,
    // Color branch (empty arrays for proposal networks).
    color_input: Array2<f64>,
    color_hidden: Array2<f64>,
    colors: Vec<[f64; 3]>,
}

fn dense_forward(x: &Array2<f64>, w: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let mut y = x.dot(&w);
    y += &b.row(0);
    y
}

fn relu_inplace(y: &mut Array2<f64>) {
    y.mapv_inplace(|v| v.max(0.0));
}

/// Shared trunk + density head. Returns (tau, trunk output, cache pieces).
fn trunk_forward(store: &ParamStore, feats: ArrayView2<f64>) -> (Vec<f64>, Array2<f64>, Vec<Array2<f64>>, Vec<Array2<f64>>, Array1<f64>) {
    let spec = &store.spec;
    let mut layer_inputs = Vec::with_capacity(spec.depth);
    let mut layer_outputs = Vec::with_capacity(spec.depth);
    let mut h = feats.to_owned();
    for i in 0..spec.depth {
        let x = if i > 0 && spec.skip_layers.contains(&i) {
            let mut x = Array2::zeros((h.nrows(), h.ncols() + feats.ncols()));
            x.slice_mut(ndarray::s![.., ..h.ncols()]).assign(&h);
            x.slice_mut(ndarray::s![.., h.ncols()..]).assign(&feats);
            x
        } else {
            h
        };
        let w = ParamStore::view(&store.values, store.seg(2 * i));
        let b = ParamStore::view(&store.values, store.seg(2 * i + 1));
        let mut y = dense_forward(&x, w, b);
        relu_inplace(&mut y);
        layer_inputs.push(x);
        layer_outputs.push(y.clone());
        h = y;
    }
    let dseg = 2 * spec.depth;
    let wd = ParamStore::view(&store.values, store.seg(dseg));
    let bd = store.values[store.seg(dseg + 1).offset];
    let raw = h.dot(&wd).column(0).to_owned() + bd;
    let tau = raw.iter().map(|&r| softplus(r)).collect();
    (tau, h, layer_inputs, layer_outputs, raw)
}

/// Forward pass of a density-only proposal network over a batch of feature
/// rows. Rejects a feature width that does not match the spec.
pub fn proposal_forward(store: &ParamStore, feats: ArrayView2<f64>) -> Result<(Vec<f64>, ForwardCache)> {
    if store.spec.has_color_head {
        return Err(Error::invalid("proposal_forward called on a color-head network"));
    }
    if feats.ncols() != store.spec.input_dim {
        return Err(Error::invalid(format!(
            "feature width {} != spec input_dim {}",
            feats.ncols(),
            store.spec.input_dim
        )));
    }
    let (tau, _trunk, layer_inputs, layer_outputs, raw) = trunk_forward(store, feats);
    Ok((
        tau,
        ForwardCache {
            layer_inputs,
            layer_outputs,
            density_raw: raw,
            color_input: Array2::zeros((0, 0)),
            color_hidden: Array2::zeros((0, 0)),
            colors: Vec::new(),
        },
    ))
}

/// Forward pass of the NeRF network: density from the position trunk, color
/// from the bottleneck concatenated with direction features. Density is
/// view-independent by construction.
pub fn nerf_forward(
    store: &ParamStore,
    feats: ArrayView2<f64>,
    dir_feats: ArrayView2<f64>,
) -> Result<(Vec<f64>, Vec<[f64; 3]>, ForwardCache)> {
    let spec = &store.spec;
    if !spec.has_color_head {
        return Err(Error::invalid("nerf_forward called on a density-only network"));
    }
    if feats.ncols() != spec.input_dim {
        return Err(Error::invalid(format!(
            "feature width {} != spec input_dim {}",
            feats.ncols(),
            spec.input_dim
        )));
    }
    if dir_feats.ncols() != spec.dir_dim || dir_feats.nrows() != feats.nrows() {
        return Err(Error::invalid("direction feature shape mismatch"));
    }
    let (tau, trunk, layer_inputs, layer_outputs, raw) = trunk_forward(store, feats);

    let base = 2 * spec.depth + 2;
    let wbn = ParamStore::view(&store.values, store.seg(base));
    let bbn = ParamStore::view(&store.values, store.seg(base + 1));
    let bn = dense_forward(&trunk, wbn, bbn);

    let n = feats.nrows();
    let mut cin = Array2::zeros((n, spec.bottleneck + spec.dir_dim));
    cin.slice_mut(ndarray::s![.., ..spec.bottleneck]).assign(&bn);
    cin.slice_mut(ndarray::s![.., spec.bottleneck..]).assign(&dir_feats);

    let wc0 = ParamStore::view(&store.values, store.seg(base + 2));
    let bc0 = ParamStore::view(&store.values, store.seg(base + 3));
    let mut ch = dense_forward(&cin, wc0, bc0);
    relu_inplace(&mut ch);

    let wc1 = ParamStore::view(&store.values, store.seg(base + 4));
    let bc1 = ParamStore::view(&store.values, store.seg(base + 5));
    let craw = dense_forward(&ch, wc1, bc1);
    let colors: Vec<[f64; 3]> = (0..n)
        .map(|s| [sigmoid(craw[(s, 0)]), sigmoid(craw[(s, 1)]), sigmoid(craw[(s, 2)])])
        .collect();

    Ok((
        tau,
        colors.clone(),
        ForwardCache {
            layer_inputs,
            layer_outputs,
            density_raw: raw,
            color_input: cin,
            color_hidden: ch,
            colors,
        },
    ))
}

/// Accumulates `x^T dy` / column sums / `dy W^T` for one dense layer.
fn dense_backward(
    x: &Array2<f64>,
    w: ArrayView2<f64>,
    dy: &Array2<f64>,
    gw: &mut ArrayViewMut2<f64>,
    gb: &mut ArrayViewMut2<f64>,
) -> Array2<f64> {
    let gw_new = x.t().dot(dy);
    gw.zip_mut_with(&gw_new, |a, b| *a += b);
    let sums = dy.sum_axis(Axis(0));
    gb.row_mut(0).zip_mut_with(&sums, |a, b| *a += b);
    dy.dot(&w.t())
}

fn grad_views<'a>(grads: &'a mut [f64], seg_w: &Segment, seg_b: &Segment) -> (ArrayViewMut2<'a, f64>, ArrayViewMut2<'a, f64>) {
    debug_assert!(seg_w.offset + seg_w.rows * seg_w.cols == seg_b.offset);
    let (left, right) = grads[seg_w.offset..].split_at_mut(seg_w.rows * seg_w.cols);
    let gw = ArrayViewMut2::from_shape((seg_w.rows, seg_w.cols), left).unwrap();
    let gb = ArrayViewMut2::from_shape((seg_b.rows, seg_b.cols), &mut right[..seg_b.rows * seg_b.cols]).unwrap();
    (gw, gb)
}

fn relu_mask(dh: &mut Array2<f64>, h: &Array2<f64>) {
    dh.zip_mut_with(h, |d, &h| {
        if h <= 0.0 {
            *d = 0.0;
        }
    });
}

/// Trunk + density-head reverse pass shared by both networks. `d_trunk_extra`
/// carries gradients arriving at the trunk output from the color branch.
fn trunk_backward(
    store: &ParamStore,
    cache: &ForwardCache,
    d_tau: &[f64],
    d_trunk_extra: Option<Array2<f64>>,
    grads: &mut [f64],
    mut d_feats: Option<&mut Array2<f64>>,
) {
    let spec = &store.spec;
    let n = cache.density_raw.len();
    let dseg = 2 * spec.depth;

    // Density head: d_raw = d_tau * softplus'(raw).
    let mut d_raw = Array2::zeros((n, 1));
    for s in 0..n {
        d_raw[(s, 0)] = d_tau[s] * sigmoid(cache.density_raw[s]);
    }
    let trunk_out = cache.layer_outputs.last().unwrap();
    let (seg_w, seg_b) = (store.seg(dseg).clone(), store.seg(dseg + 1).clone());
    let wd = ParamStore::view(&store.values, &seg_w);
    let mut d_h = {
        let (mut gw, mut gb) = grad_views(grads, &seg_w, &seg_b);
        dense_backward(trunk_out, wd, &d_raw, &mut gw, &mut gb)
    };
    if let Some(extra) = d_trunk_extra {
        d_h += &extra;
    }

    for i in (0..spec.depth).rev() {
        relu_mask(&mut d_h, &cache.layer_outputs[i]);
        let (seg_w, seg_b) = (store.seg(2 * i).clone(), store.seg(2 * i + 1).clone());
        let w = ParamStore::view(&store.values, &seg_w);
        let d_x = {
            let (mut gw, mut gb) = grad_views(grads, &seg_w, &seg_b);
            dense_backward(&cache.layer_inputs[i], w, &d_h, &mut gw, &mut gb)
        };
        if i == 0 {
            if let Some(df) = d_feats.as_deref_mut() {
                *df += &d_x;
            }
        } else if spec.skip_layers.contains(&i) {
            d_h = d_x.slice(ndarray::s![.., ..spec.width]).to_owned();
            if let Some(df) = d_feats.as_deref_mut() {
                *df += &d_x.slice(ndarray::s![.., spec.width..]);
            }
        } else {
            d_h = d_x;
        }
    }
}

/// Reverse pass for a proposal network: accumulates d(loss)/d(params) into
/// `grads` (same layout as `store.values`) given d(loss)/d(tau), and
/// optionally d(loss)/d(features).
pub fn proposal_backward(
    store: &ParamStore,
    cache: &ForwardCache,
    d_tau: &[f64],
    grads: &mut [f64],
    d_feats: Option<&mut Array2<f64>>,
) {
    debug_assert_eq!(grads.len(), store.len());
    debug_assert_eq!(d_tau.len(), cache.density_raw.len());
    trunk_backward(store, cache, d_tau, None, grads, d_feats);
}

/// Reverse pass for the NeRF network given d(loss)/d(tau) and
/// d(loss)/d(colors).
pub fn nerf_backward(
    store: &ParamStore,
    cache: &ForwardCache,
    d_tau: &[f64],
    d_colors: &[[f64; 3]],
    grads: &mut [f64],
    d_feats: Option<&mut Array2<f64>>,
) {
    let spec = &store.spec;
    debug_assert!(spec.has_color_head);
    let n = cache.density_raw.len();
    let base = 2 * spec.depth + 2;

    // Sigmoid head: d_craw = d_color * c (1 - c).
    let mut d_craw = Array2::zeros((n, 3));
    for s in 0..n {
        for ch in 0..3 {
            let c = cache.colors[s][ch];
            d_craw[(s, ch)] = d_colors[s][ch] * c * (1.0 - c);
        }
    }

    let (seg_w, seg_b) = (store.seg(base + 4).clone(), store.seg(base + 5).clone());
    let wc1 = ParamStore::view(&store.values, &seg_w);
    let mut d_ch = {
        let (mut gw, mut gb) = grad_views(grads, &seg_w, &seg_b);
        dense_backward(&cache.color_hidden, wc1, &d_craw, &mut gw, &mut gb)
    };

    relu_mask(&mut d_ch, &cache.color_hidden);
    let (seg_w, seg_b) = (store.seg(base + 2).clone(), store.seg(base + 3).clone());
    let wc0 = ParamStore::view(&store.values, &seg_w);
    let d_cin = {
        let (mut gw, mut gb) = grad_views(grads, &seg_w, &seg_b);
        dense_backward(&cache.color_input, wc0, &d_ch, &mut gw, &mut gb)
    };

    let d_bn = d_cin.slice(ndarray::s![.., ..spec.bottleneck]).to_owned();
    // Direction features are constants of the pipeline; their gradient slice
    // is discarded.
    let trunk_out = cache.layer_outputs.last().unwrap();
    let (seg_w, seg_b) = (store.seg(base).clone(), store.seg(base + 1).clone());
    let wbn = ParamStore::view(&store.values, &seg_w);
    let d_trunk_extra = {
        let (mut gw, mut gb) = grad_views(grads, &seg_w, &seg_b);
        dense_backward(trunk_out, wbn, &d_bn, &mut gw, &mut gb)
    };

    trunk_backward(store, cache, d_tau, Some(d_trunk_extra), grads, d_feats);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn feats(rng: &mut impl Rng, n: usize, dim: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, dim), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn minimal_spec_layout() {
        let spec = MlpSpec::proposal(1, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = init_params(&spec, &mut rng).unwrap();
        // One 1x1 weight + bias, then the density head weight + bias.
        assert_eq!(store.len(), 4);
        assert!(store.grads.iter().all(|&g| g == 0.0));
        assert_eq!(store.segment("trunk0.w").unwrap().1, (1, 1));
        assert_eq!(store.segment("density.b").unwrap().0[0], DENSITY_BIAS_INIT);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let spec = MlpSpec::nerf(3, 16, 12, 6, 8, 8);
        let a = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.values, b.values);
        let c = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn zero_params_give_softplus_zero() {
        let spec = MlpSpec::proposal(2, 8, 6);
        let mut store = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        store.values.iter_mut().for_each(|v| *v = 0.0);
        let x = feats(&mut ChaCha8Rng::seed_from_u64(3), 5, 6);
        let (tau, _) = proposal_forward(&store, x.view()).unwrap();
        for t in tau {
            assert!((t - 2f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_batch_is_fine() {
        let spec = MlpSpec::proposal(2, 8, 6);
        let store = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let x = Array2::<f64>::zeros((0, 6));
        let (tau, _) = proposal_forward(&store, x.view()).unwrap();
        assert!(tau.is_empty());
    }

    #[test]
    fn forward_rejects_width_mismatch() {
        let spec = MlpSpec::proposal(2, 8, 6);
        let store = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let x = Array2::<f64>::zeros((3, 7));
        assert!(proposal_forward(&store, x.view()).is_err());

        let spec = MlpSpec::nerf(2, 8, 6, 4, 4, 8);
        let store = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let x = Array2::<f64>::zeros((3, 6));
        let d = Array2::<f64>::zeros((3, 5));
        assert!(nerf_forward(&store, x.view(), d.view()).is_err());
    }

    #[test]
    fn initial_density_is_small() {
        let spec = MlpSpec::proposal(2, 32, 24);
        let store = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let x = feats(&mut ChaCha8Rng::seed_from_u64(7), 256, 24);
        let (tau, _) = proposal_forward(&store, x.view()).unwrap();
        let mean = tau.iter().sum::<f64>() / tau.len() as f64;
        assert!((0.01..=1.0).contains(&mean), "mean initial density {mean}");
    }

    #[test]
    fn density_ignores_view_direction() {
        let spec = MlpSpec::nerf(3, 16, 10, 6, 8, 8);
        let store = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = feats(&mut rng, 7, 10);
        let d1 = Array2::<f64>::zeros((7, 6));
        let d2 = feats(&mut rng, 7, 6);
        let (tau1, colors1, _) = nerf_forward(&store, x.view(), d1.view()).unwrap();
        let (tau2, colors2, _) = nerf_forward(&store, x.view(), d2.view()).unwrap();
        assert_eq!(tau1, tau2);
        assert_ne!(colors1, colors2);
        for c in colors1.iter().chain(colors2.iter()) {
            assert!(c.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn forward_is_reproducible() {
        let spec = MlpSpec::nerf(3, 16, 10, 6, 8, 8);
        let store = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let x = feats(&mut ChaCha8Rng::seed_from_u64(12), 4, 10);
        let d = feats(&mut ChaCha8Rng::seed_from_u64(13), 4, 6);
        let (t1, c1, _) = nerf_forward(&store, x.view(), d.view()).unwrap();
        let (t2, c2, _) = nerf_forward(&store, x.view(), d.view()).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn single_dense_layer_gradient_is_input() {
        // Loss = sum of outputs of one linear unit: dW equals the input row.
        let x = Array2::from_shape_vec((1, 3), vec![0.4, -1.3, 2.2]).unwrap();
        let w = Array2::<f64>::zeros((3, 1));
        let mut gw = Array2::<f64>::zeros((3, 1));
        let mut gb = Array2::<f64>::zeros((1, 1));
        let dy = Array2::from_elem((1, 1), 1.0);
        dense_backward(&x, w.view(), &dy, &mut gw.view_mut(), &mut gb.view_mut());
        assert_eq!(gw.column(0).to_vec(), vec![0.4, -1.3, 2.2]);
        assert_eq!(gb[(0, 0)], 1.0);
    }

    #[test]
    fn relu_at_zero_has_zero_subgradient() {
        // Zero input with zero bias puts every trunk pre-activation at
        // exactly 0; the chosen subgradient must zero all trunk weight
        // gradients while the density head still sees its bias.
        let spec = MlpSpec::proposal(1, 4, 3);
        let mut store = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
        store.values.iter_mut().for_each(|v| *v = 0.0);
        let x = Array2::<f64>::zeros((1, 3));
        let (_, cache) = proposal_forward(&store, x.view()).unwrap();
        let mut grads = vec![0.0; store.len()];
        proposal_backward(&store, &cache, &[1.0], &mut grads, None);
        let (w0, shape) = store.segment("trunk0.w").unwrap();
        let off = w0.as_ptr() as usize - store.values.as_ptr() as usize;
        let off = off / std::mem::size_of::<f64>();
        let len = shape.0 * shape.1;
        assert!(grads[off..off + len].iter().all(|&g| g == 0.0));
        // Density bias gradient is softplus'(0) = 0.5.
        let (db, _) = store.segment("density.b").unwrap();
        let db_off = (db.as_ptr() as usize - store.values.as_ptr() as usize) / std::mem::size_of::<f64>();
        assert!((grads[db_off] - 0.5).abs() < 1e-15);
    }

    /// Central finite differences over every parameter of `store` for a
    /// scalar loss function.
    fn fd_check(store: &mut ParamStore, loss: &dyn Fn(&ParamStore) -> f64, analytic: &[f64]) {
        let h = 1e-4;
        for p in 0..store.len() {
            let orig = store.values[p];
            store.values[p] = orig + h;
            let lp = loss(store);
            store.values[p] = orig - h;
            let lm = loss(store);
            store.values[p] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - analytic[p]).abs();
            assert!(
                err <= 1e-4 * fd.abs().max(1e-4),
                "param {p}: fd {fd} vs analytic {} (err {err})",
                analytic[p]
            );
        }
    }

    #[test]
    fn proposal_gradients_match_finite_differences() {
        let spec = MlpSpec::proposal(3, 16, 8);
        let mut store = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(15)).unwrap();
        let x = feats(&mut ChaCha8Rng::seed_from_u64(16), 3, 8);
        let coeff: Vec<f64> = (0..3).map(|i| 0.3 + 0.2 * i as f64).collect();

        let loss = |s: &ParamStore| -> f64 {
            let (tau, _) = proposal_forward(s, x.view()).unwrap();
            tau.iter().zip(&coeff).map(|(t, c)| t * t * c).sum()
        };
        let (tau, cache) = proposal_forward(&store, x.view()).unwrap();
        let d_tau: Vec<f64> = tau.iter().zip(&coeff).map(|(t, c)| 2.0 * t * c).collect();
        let mut grads = vec![0.0; store.len()];
        proposal_backward(&store, &cache, &d_tau, &mut grads, None);
        fd_check(&mut store, &loss, &grads);
    }

    #[test]
    fn nerf_gradients_match_finite_differences() {
        let spec = MlpSpec::nerf(3, 16, 8, 6, 6, 8);
        let mut store = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
        let x = feats(&mut ChaCha8Rng::seed_from_u64(18), 3, 8);
        let d = feats(&mut ChaCha8Rng::seed_from_u64(19), 3, 6);

        let loss = |s: &ParamStore| -> f64 {
            let (tau, colors, _) = nerf_forward(s, x.view(), d.view()).unwrap();
            let lt: f64 = tau.iter().map(|t| t * t).sum();
            let lc: f64 = colors.iter().flatten().map(|c| c * c * 0.5).sum();
            lt + lc
        };
        let (tau, colors, cache) = nerf_forward(&store, x.view(), d.view()).unwrap();
        let d_tau: Vec<f64> = tau.iter().map(|t| 2.0 * t).collect();
        let d_colors: Vec<[f64; 3]> = colors.iter().map(|c| [c[0], c[1], c[2]]).collect();
        let mut grads = vec![0.0; store.len()];
        nerf_backward(&store, &cache, &d_tau, &d_colors, &mut grads, None);
        fd_check(&mut store, &loss, &grads);
    }

    #[test]
    fn feature_gradients_match_finite_differences() {
        let spec = MlpSpec::nerf(4, 12, 8, 4, 6, 8);
        let store = init_params(&spec, &mut ChaCha8Rng::seed_from_u64(20)).unwrap();
        let x = feats(&mut ChaCha8Rng::seed_from_u64(21), 2, 8);
        let d = feats(&mut ChaCha8Rng::seed_from_u64(22), 2, 4);

        let loss = |x: &Array2<f64>| -> f64 {
            let (tau, colors, _) = nerf_forward(&store, x.view(), d.view()).unwrap();
            tau.iter().sum::<f64>() + colors.iter().flatten().sum::<f64>()
        };
        let (_, _, cache) = nerf_forward(&store, x.view(), d.view()).unwrap();
        let d_tau = vec![1.0; 2];
        let d_colors = vec![[1.0; 3]; 2];
        let mut grads = vec![0.0; store.len()];
        let mut d_x = Array2::zeros((2, 8));
        nerf_backward(&store, &cache, &d_tau, &d_colors, &mut grads, Some(&mut d_x));

        let h = 1e-5;
        let mut xp = x.clone();
        for s in 0..2 {
            for j in 0..8 {
                let orig = xp[(s, j)];
                xp[(s, j)] = orig + h;
                let lp = loss(&xp);
                xp[(s, j)] = orig - h;
                let lm = loss(&xp);
                xp[(s, j)] = orig;
                let fd = (lp - lm) / (2.0 * h);
                assert!((fd - d_x[(s, j)]).abs() <= 1e-5 * fd.abs().max(1e-3), "({s},{j})");
            }
        }
    }
}
