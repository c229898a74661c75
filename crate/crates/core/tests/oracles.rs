//! Monte-Carlo oracle invariants and property tests that are too heavy for
//! inline unit tests.

use proptest::prelude::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use unerf::check::{mc_frustum_moments, suite_frusta, suite_warp};
use unerf::geometry::{
    contract, conical_frustum_to_gaussian, s_to_t, t_to_s, DistanceCurve, Ray, Vec3,
};
use unerf::histograms::{
    anneal_weights, weights_from_density, DensityVector, DistanceSpace, WeightHistogram,
};

#[test]
fn frustum_moments_match_monte_carlo_over_50_frusta() {
    // Batched standard errors, each moment within 3 sigma.
    suite_frusta(50, 1_000_000).unwrap();
}

#[test]
fn warp_matches_monte_carlo_propagation() {
    suite_warp(8, 400_000).unwrap();
}

#[test]
fn frustum_worked_example_close_to_oracle() {
    let ray = Ray::new(Vec3::zeros(), Vec3::z(), 0.01, 0.5, 10.0).unwrap();
    let seg = conical_frustum_to_gaussian(&ray, 1.0, 2.0).unwrap();
    // Exact uniform-frustum moments for comparison: E[t] and the radial
    // second moment follow from the t^2-weighted slice distribution.
    let (t0, t1) = (1.0f64, 2.0f64);
    let et = 0.75 * (t1.powi(4) - t0.powi(4)) / (t1.powi(3) - t0.powi(3));
    let et2 = 0.6 * (t1.powi(5) - t0.powi(5)) / (t1.powi(3) - t0.powi(3));
    assert!((seg.mean.z - et).abs() < 1e-12);
    assert!((seg.cov[(2, 2)] - (et2 - et * et)).abs() < 1e-12);
    assert!((seg.cov[(0, 0)] - 0.01f64.powi(2) * et2 / 4.0).abs() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mc_mean, mc_cov, se_mean, se_cov) = mc_frustum_moments(&ray, 1.0, 2.0, 1_000_000, &mut rng);
    for i in 0..3 {
        assert!((seg.mean[i] - mc_mean[i]).abs() <= 3.0 * se_mean[i].max(1e-12));
        for j in 0..3 {
            assert!((seg.cov[(i, j)] - mc_cov[(i, j)]).abs() <= 3.0 * se_cov[(i, j)].max(1e-12));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn contract_norm_bound_holds(
        x in -50.0..50.0f64,
        y in -50.0..50.0f64,
        z in -50.0..50.0f64,
        scale in 0.01..1000.0f64,
    ) {
        let v = Vec3::new(x, y, z) * scale;
        let c = contract(v);
        let bound = 2.0 - 1.0 / v.norm().max(1.0);
        prop_assert!(c.norm() <= bound + 1e-12);
        if v.norm() <= 1.0 {
            prop_assert_eq!(c, v);
        }
    }

    #[test]
    fn s_t_mapping_roundtrips(
        s in 0.0..=1.0f64,
        t_near in 0.01..2.0f64,
        ratio in 1.5..5000.0f64,
        curve_pick in 0..3usize,
    ) {
        let curve = [DistanceCurve::Reciprocal, DistanceCurve::Logarithmic, DistanceCurve::Linear][curve_pick];
        let t_far = t_near * ratio;
        let t = s_to_t(s, t_near, t_far, curve).unwrap();
        prop_assert!(t >= t_near * (1.0 - 1e-12) && t <= t_far * (1.0 + 1e-12));
        let s2 = t_to_s(t, t_near, t_far, curve).unwrap();
        prop_assert!((s2 - s).abs() <= 1e-10 * s.max(1.0));
    }

    #[test]
    fn quadrature_weights_stay_subunit(
        tau in prop::collection::vec(0.0..100.0f64, 1..32),
        gaps in prop::collection::vec(1e-4..3.0f64, 1..32),
    ) {
        let n = tau.len().min(gaps.len());
        let tau = DensityVector::new(tau[..n].to_vec()).unwrap();
        let mut edges = vec![0.2];
        for g in &gaps[..n] {
            let last = *edges.last().unwrap();
            edges.push(last + g);
        }
        let hist = weights_from_density(&tau, &edges).unwrap();
        prop_assert!(hist.weight_sum() <= 1.0 + 1e-6);
        prop_assert!(hist.weights().iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn anneal_preserves_mass_and_positivity(
        w in prop::collection::vec(0.0..2.0f64, 1..24),
        step in 0..100usize,
    ) {
        let out = anneal_weights(&w, step, 100, 10.0).unwrap();
        let before: f64 = w.iter().sum();
        let after: f64 = out.iter().sum();
        prop_assert!((before - after).abs() <= 1e-9 * before.max(1.0));
        prop_assert!(out.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn distortion_nonnegative_and_zero_only_for_empty(
        w in prop::collection::vec(0.0..1.0f64, 1..16),
        gaps in prop::collection::vec(0.01..1.0f64, 1..16),
    ) {
        let n = w.len().min(gaps.len());
        let total: f64 = gaps[..n].iter().sum();
        let mut edges = vec![0.0];
        for g in &gaps[..n] {
            edges.push(edges.last().unwrap() + g / total);
        }
        let hist = WeightHistogram::new(DistanceSpace::Normalized, edges, w[..n].to_vec()).unwrap();
        let loss = unerf::histograms::distortion_loss(&hist).unwrap();
        prop_assert!(loss >= 0.0);
        if w[..n].iter().sum::<f64>() > 0.0 {
            prop_assert!(loss > 0.0);
        }
    }
}
