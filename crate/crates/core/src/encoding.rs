//! Integrated positional encoding of contracted Gaussians, plus the plain
//! view-direction encoding.
//!
//! Feature layout is fixed: basis-major, level-minor, sin block followed by
//! cos block, giving `2 * rows * levels` values. Parameter files depend on
//! this ordering.

use crate::error::{Error, Result};
use crate::geometry::{GaussianSegment, Vec3};

/// Projection basis for the encoding. Every row is unit-norm within 1e-6.
#[derive(Debug, Clone)]
pub struct EncodingBasis {
    rows: Vec<Vec3>,
}

/// The 21 unit-norm vertices of a twice-tessellated icosahedron (negative
/// duplicates removed), shipped as a checked-in text asset.
const OFF_AXIS_BASIS_TEXT: &str = include_str!("assets/off_axis_basis.txt");

impl EncodingBasis {
    pub fn new(rows: Vec<Vec3>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("encoding basis needs at least one row"));
        }
        for (i, r) in rows.iter().enumerate() {
            if (r.norm() - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("basis row {i} is not unit-norm: {}", r.norm())));
            }
        }
        Ok(EncodingBasis { rows })
    }

    /// The identity basis used by the plain (axis-aligned) encoding.
    pub fn axis_aligned() -> Self {
        EncodingBasis { rows: vec![Vec3::x(), Vec3::y(), Vec3::z()] }
    }

    /// The 21-row off-axis basis.
    pub fn off_axis() -> Self {
        let rows = OFF_AXIS_BASIS_TEXT
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                let v: Vec<f64> = line.split_whitespace().map(|t| t.parse().unwrap()).collect();
                Vec3::new(v[0], v[1], v[2])
            })
            .collect();
        EncodingBasis::new(rows).expect("off-axis basis asset must be unit-norm")
    }

    pub fn rows(&self) -> &[Vec3] {
        &self.rows
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    /// Feature width produced with `levels` frequency levels.
    pub fn feature_len(&self, levels: usize) -> usize {
        2 * self.rows.len() * levels
    }
}

/// A flat encoding vector; every entry lies in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Writes the integrated positional encoding of `seg` into `out`
/// (length `basis.feature_len(levels)`). Hot-path variant of
/// [`ipe_features`].
///
/// For basis row p and level l the sin entry is
/// `sin(2^l p.mu) * exp(-2^(2l-1) * p^T Sigma p)`; the per-row variances are
/// the diagonal of P Sigma P^T, evaluated row-wise as p . (Sigma p) which is
/// the column-sum form of P^T o (Sigma P^T).
pub fn ipe_features_into(
    seg: &GaussianSegment,
    basis: &EncodingBasis,
    levels: usize,
    out: &mut [f64],
) {
    let m = basis.num_rows();
    debug_assert_eq!(out.len(), 2 * m * levels);
    let cos_off = m * levels;
    for (r, p) in basis.rows().iter().enumerate() {
        let x = p.dot(&seg.mean);
        let var = p.dot(&(seg.cov * p));
        let mut scale = 1.0f64;
        for l in 0..levels {
            // 2^(2l - 1) = scale^2 / 2 with scale = 2^l.
            let atten = (-0.5 * scale * scale * var).exp();
            let (s, c) = (scale * x).sin_cos();
            out[r * levels + l] = s * atten;
            out[cos_off + r * levels + l] = c * atten;
            scale *= 2.0;
        }
    }
}

/// Integrated positional encoding of a Gaussian segment under `basis` with
/// `levels` frequency levels. With a zero covariance this reduces to the
/// plain sin/cos encoding of the mean.
pub fn ipe_features(seg: &GaussianSegment, basis: &EncodingBasis, levels: usize) -> Result<FeatureVector> {
    if levels == 0 {
        return Err(Error::invalid("need at least one frequency level"));
    }
    if !(seg.cov.iter().all(|v| v.is_finite()) && seg.mean.iter().all(|v| v.is_finite())) {
        return Err(Error::invalid("non-finite Gaussian segment"));
    }
    let mut out = vec![0.0; basis.feature_len(levels)];
    ipe_features_into(seg, basis, levels, &mut out);
    Ok(FeatureVector(out))
}

/// Plain positional encoding of a unit direction with the axis-aligned
/// basis (the zero-variance case of the integrated encoding).
pub fn dir_features(d: Vec3, levels: usize) -> Result<FeatureVector> {
    if levels == 0 {
        return Err(Error::invalid("need at least one frequency level"));
    }
    if (d.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("direction must be unit-norm, got {}", d.norm())));
    }
    let mut out = vec![0.0; 2 * 3 * levels];
    dir_features_into(d, levels, &mut out);
    Ok(FeatureVector(out))
}

/// Hot-path variant of [`dir_features`]; `out` must have length `6 * levels`.
pub fn dir_features_into(d: Vec3, levels: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), 6 * levels);
    let cos_off = 3 * levels;
    for r in 0..3 {
        let mut scale = 1.0f64;
        for l in 0..levels {
            let (s, c) = (scale * d[r]).sin_cos();
            out[r * levels + l] = s;
            out[cos_off + r * levels + l] = c;
            scale *= 2.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Mat3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_sym(rng: &mut impl Rng, scale: f64) -> Mat3 {
        let a = Mat3::from_fn(|_, _| rng.gen_range(-scale..scale));
        a * a.transpose()
    }

    #[test]
    fn off_axis_basis_is_21_unit_rows() {
        let basis = EncodingBasis::off_axis();
        assert_eq!(basis.num_rows(), 21);
        for r in basis.rows() {
            assert!((r.norm() - 1.0).abs() < 1e-6);
        }
        // Spot-check the transcription.
        assert_eq!(basis.rows()[0], Vec3::new(0.8506508, 0.0, 0.5257311));
        assert_eq!(basis.rows()[3], Vec3::new(1.0, 0.0, 0.0));
        assert_eq!(basis.rows()[20], Vec3::new(-0.809017, 0.5, -0.309017));
    }

    #[test]
    fn zero_covariance_equals_plain_encoding() {
        let basis = EncodingBasis::off_axis();
        let mu = Vec3::new(0.3, -1.2, 0.7);
        let seg = GaussianSegment::new(mu, Mat3::zeros()).unwrap();
        let f = ipe_features(&seg, &basis, 3).unwrap();
        let levels = 3;
        let m = basis.num_rows();
        for (r, p) in basis.rows().iter().enumerate() {
            for l in 0..levels {
                let phase = 2f64.powi(l as i32) * p.dot(&mu);
                assert!((f.0[r * levels + l] - phase.sin()).abs() < 1e-15);
                assert!((f.0[m * levels + r * levels + l] - phase.cos()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identity_basis_attenuation_is_exact() {
        let basis = EncodingBasis::axis_aligned();
        let mu = Vec3::new(0.5, 1.5, -0.25);
        let sig = Vec3::new(0.04, 0.5, 2.0);
        let seg = GaussianSegment::new(mu, Mat3::from_diagonal(&sig)).unwrap();
        let levels = 4;
        let f = ipe_features(&seg, &basis, levels).unwrap();
        for r in 0..3 {
            for l in 0..levels {
                let atten = (-(2f64.powi(2 * l as i32 - 1)) * sig[r]).exp();
                let expect = (2f64.powi(l as i32) * mu[r]).sin() * atten;
                assert!((f.0[r * levels + l] - expect).abs() < 1e-15, "row {r} level {l}");
            }
        }
    }

    #[test]
    fn huge_variance_kills_features() {
        let basis = EncodingBasis::off_axis();
        // Sigma = 80 * I gives sigma^2_p = 80 for every unit row, beyond the
        // 40 threshold for every level.
        let seg = GaussianSegment::new(Vec3::new(0.1, 0.2, 0.3), Mat3::identity() * 80.0).unwrap();
        let f = ipe_features(&seg, &basis, 5).unwrap();
        assert!(f.0.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn diagonal_identity_matches_explicit_projection() {
        let basis = EncodingBasis::off_axis();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let cov = random_sym(&mut rng, 1.0);
            for p in basis.rows() {
                // Row-wise form used by the implementation.
                let fast = p.dot(&(cov * p));
                // Explicit diag(P Sigma P^T) entry.
                let explicit = (p.transpose() * cov * p)[(0, 0)];
                assert!((fast - explicit).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn off_axis_separates_what_axis_aligned_cannot() {
        // Two Gaussians with identical diagonals but opposite xy correlation.
        let mu = Vec3::new(0.4, -0.2, 0.9);
        let c = 0.45;
        let make = |off: f64| {
            GaussianSegment::new(mu, Mat3::new(0.5, off, 0.0, off, 0.5, 0.0, 0.0, 0.0, 0.3)).unwrap()
        };
        let a = make(c);
        let b = make(-c);

        let axis = EncodingBasis::axis_aligned();
        let fa = ipe_features(&a, &axis, 4).unwrap();
        let fb = ipe_features(&b, &axis, 4).unwrap();
        let max_axis = fa.0.iter().zip(&fb.0).map(|(x, y)| (x - y).abs()).fold(0.0f64, f64::max);
        assert!(max_axis < 1e-15, "axis-aligned features should be identical, diff {max_axis}");

        let off = EncodingBasis::off_axis();
        let fa = ipe_features(&a, &off, 4).unwrap();
        let fb = ipe_features(&b, &off, 4).unwrap();
        let max_off = fa.0.iter().zip(&fb.0).map(|(x, y)| (x - y).abs()).fold(0.0f64, f64::max);
        assert!(max_off > 1e-3, "off-axis features should differ, diff {max_off}");
    }

    #[test]
    fn attenuation_is_monotone_in_psd_growth() {
        let basis = EncodingBasis::off_axis();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let mu = Vec3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let cov = random_sym(&mut rng, 0.6);
            let grown = cov + random_sym(&mut rng, 0.6);
            let f0 = ipe_features(&GaussianSegment::new_unchecked(mu, cov), &basis, 4).unwrap();
            let f1 = ipe_features(&GaussianSegment::new_unchecked(mu, grown), &basis, 4).unwrap();
            for (a, b) in f0.0.iter().zip(&f1.0) {
                assert!(b.abs() <= a.abs() + 1e-15);
            }
        }
    }

    #[test]
    fn rejects_non_finite_and_zero_levels() {
        let basis = EncodingBasis::axis_aligned();
        let seg = GaussianSegment::new_unchecked(Vec3::zeros(), Mat3::identity() * f64::NAN);
        assert!(ipe_features(&seg, &basis, 2).is_err());
        let ok = GaussianSegment::new_unchecked(Vec3::zeros(), Mat3::zeros());
        assert!(ipe_features(&ok, &basis, 0).is_err());
    }

    #[test]
    fn dir_features_example_and_range() {
        let f = dir_features(Vec3::new(0.0, 0.0, 1.0), 1).unwrap();
        let expect = [0.0, 0.0, 1f64.sin(), 1.0, 1.0, 1f64.cos()];
        for (a, b) in f.0.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }

        let f = dir_features(Vec3::new(1.0, 0.0, 0.0), 2).unwrap();
        // Level-1 entries are sin/cos of 2 * component (basis-major,
        // level-minor layout: index r * L + 1).
        assert!((f.0[1] - 2f64.sin()).abs() < 1e-15);
        assert!((f.0[6 + 1] - 2f64.cos()).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let d = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
            let f = dir_features(d, 4).unwrap();
            assert!(f.0.iter().all(|v| v.abs() <= 1.0));
        }
        assert!(dir_features(Vec3::new(0.5, 0.0, 0.0), 4).is_err());
    }
}
