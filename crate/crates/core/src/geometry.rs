//! Camera rays, normalized ray distances, conical-frustum Gaussians, the
//! scene contraction, and linearized Gaussian warping.
//!
//! All operations here are pure functions of their inputs and safe to call
//! concurrently.
//!
//! Conventions: right-handed camera frame, -z forward, +x right, +y up.
//! Pose rotations are camera-to-world.

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// One pixel's cone: origin, unit direction, cone radius at unit distance,
/// and the metric near/far bounds.
#[derive(Debug, Clone)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    /// Cone radius at distance 1 along `direction`.
    pub base_radius: f64,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn new(origin: Vec3, direction: Vec3, base_radius: f64, t_near: f64, t_far: f64) -> Result<Self> {
        if !(origin.iter().all(|v| v.is_finite()) && direction.iter().all(|v| v.is_finite())) {
            return Err(Error::invalid("ray origin/direction must be finite"));
        }
        if (direction.norm() - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "ray direction must be unit length, got norm {}",
                direction.norm()
            )));
        }
        if !(t_near > 0.0 && t_far > t_near && t_far.is_finite()) {
            return Err(Error::invalid(format!(
                "require 0 < t_near < t_far < inf, got [{t_near}, {t_far}]"
            )));
        }
        if !(base_radius > 0.0 && base_radius.is_finite()) {
            return Err(Error::invalid("base_radius must be positive"));
        }
        Ok(Ray { origin, direction, base_radius, t_near, t_far })
    }

    /// Point at metric distance `t` along the ray.
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + t * self.direction
    }
}

/// Mean and full covariance of one conical-frustum interval.
#[derive(Debug, Clone)]
pub struct GaussianSegment {
    pub mean: Vec3,
    pub cov: Mat3,
}

impl GaussianSegment {
    /// Validates symmetry (1e-10) and positive semi-definiteness
    /// (eigenvalues >= -1e-10).
    pub fn new(mean: Vec3, cov: Mat3) -> Result<Self> {
        for i in 0..3 {
            for j in (i + 1)..3 {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-10 {
                    return Err(Error::invalid("covariance must be symmetric within 1e-10"));
                }
            }
        }
        let eigs = cov.symmetric_eigenvalues();
        if eigs.iter().any(|&e| e < -1e-10 || !e.is_finite()) {
            return Err(Error::invalid(format!(
                "covariance must be PSD, eigenvalues {eigs:?}"
            )));
        }
        Ok(GaussianSegment { mean, cov })
    }

    /// Skips the validity checks; for internal hot paths where the invariants
    /// hold by construction.
    pub(crate) fn new_unchecked(mean: Vec3, cov: Mat3) -> Self {
        GaussianSegment { mean, cov }
    }
}

/// Distance along a ray remapped to [0, 1] through an invertible curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedDistance(f64);

impl NormalizedDistance {
    pub fn new(s: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::invalid(format!("normalized distance {s} outside [0, 1]")));
        }
        Ok(NormalizedDistance(s))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// The invertible curve `g` used to map metric distance t to normalized
/// distance s. `Reciprocal` spaces samples linearly in disparity and is the
/// default; `Logarithmic` and `Linear` are provided for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistanceCurve {
    Reciprocal,
    Logarithmic,
    Linear,
}

impl DistanceCurve {
    fn g(self, x: f64) -> f64 {
        match self {
            DistanceCurve::Reciprocal => 1.0 / x,
            DistanceCurve::Logarithmic => x.ln(),
            DistanceCurve::Linear => x,
        }
    }

    fn g_inv(self, y: f64) -> f64 {
        match self {
            DistanceCurve::Reciprocal => 1.0 / y,
            DistanceCurve::Logarithmic => y.exp(),
            DistanceCurve::Linear => y,
        }
    }

    fn check_near(self, t_near: f64) -> Result<()> {
        match self {
            DistanceCurve::Reciprocal | DistanceCurve::Logarithmic if t_near <= 0.0 => Err(
                Error::invalid(format!("t_near must be > 0 for {self:?} spacing, got {t_near}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Maps a normalized distance s in [0, 1] to a metric distance t in
/// [t_near, t_far] through curve `g`: t = g^-1(s g(t_far) + (1-s) g(t_near)).
pub fn s_to_t(s: f64, t_near: f64, t_far: f64, curve: DistanceCurve) -> Result<f64> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::invalid(format!("s = {s} outside [0, 1]")));
    }
    curve.check_near(t_near)?;
    if !(t_far > t_near) {
        return Err(Error::invalid("t_far must exceed t_near"));
    }
    Ok(curve.g_inv(s * curve.g(t_far) + (1.0 - s) * curve.g(t_near)))
}

/// Inverse of [`s_to_t`].
pub fn t_to_s(t: f64, t_near: f64, t_far: f64, curve: DistanceCurve) -> Result<f64> {
    curve.check_near(t_near)?;
    if !(t_far > t_near) {
        return Err(Error::invalid("t_far must exceed t_near"));
    }
    Ok((curve.g(t) - curve.g(t_near)) / (curve.g(t_far) - curve.g(t_near)))
}

/// Gaussian moments of the cone frustum between distances t0 and t1, using
/// the numerically stable midpoint parameterization. The cone has radius
/// `base_radius * t` at distance t; moments are taken under the uniform
/// distribution over the frustum volume.
pub fn conical_frustum_to_gaussian(ray: &Ray, t0: f64, t1: f64) -> Result<GaussianSegment> {
    if !(t1 > t0) {
        return Err(Error::invalid(format!("require t0 < t1, got [{t0}, {t1}]")));
    }
    let t_mu = 0.5 * (t0 + t1);
    let t_delta = 0.5 * (t1 - t0);
    let mu2 = t_mu * t_mu;
    let d2 = t_delta * t_delta;
    let denom = 3.0 * mu2 + d2;

    let mean_t = t_mu + 2.0 * t_mu * d2 / denom;
    let var_t = d2 / 3.0 - (4.0 * d2 * d2 * (12.0 * mu2 - d2)) / (15.0 * denom * denom);
    let var_r =
        ray.base_radius * ray.base_radius * (mu2 / 4.0 + 5.0 * d2 / 12.0 - 4.0 * d2 * d2 / (15.0 * denom));

    let d = ray.direction;
    let outer = d * d.transpose();
    let cov = var_t * outer + var_r * (Mat3::identity() - outer);
    Ok(GaussianSegment::new_unchecked(ray.origin + mean_t * d, cov))
}

/// Maps all of space into the radius-2 ball: identity inside the unit ball,
/// disparity-proportional outside.
pub fn contract(x: Vec3) -> Vec3 {
    let r = x.norm();
    if r <= 1.0 {
        x
    } else {
        (2.0 - 1.0 / r) * (x / r)
    }
}

/// Analytic Jacobian of [`contract`]. On the unit sphere the outside
/// branch's one-sided limit is used, which coincides with the identity.
pub fn contract_jacobian(x: Vec3) -> Mat3 {
    let r = x.norm();
    if r <= 1.0 {
        Mat3::identity()
    } else {
        let a = 2.0 / r - 1.0 / (r * r);
        let b = 2.0 / (r * r * r) - 2.0 / (r * r * r * r);
        a * Mat3::identity() - b * (x * x.transpose())
    }
}

/// A smooth coordinate transformation together with its Jacobian, as needed
/// to push Gaussians through a nonlinearity.
pub trait SmoothMap {
    fn apply(&self, x: Vec3) -> Vec3;
    fn jacobian(&self, x: Vec3) -> Mat3;
}

/// The scene contraction as a [`SmoothMap`].
#[derive(Debug, Clone, Copy, Default)]
pub struct Contraction;

impl SmoothMap for Contraction {
    fn apply(&self, x: Vec3) -> Vec3 {
        contract(x)
    }

    fn jacobian(&self, x: Vec3) -> Mat3 {
        contract_jacobian(x)
    }
}

/// Identity map, mostly useful in tests.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityMap;

impl SmoothMap for IdentityMap {
    fn apply(&self, x: Vec3) -> Vec3 {
        x
    }

    fn jacobian(&self, _x: Vec3) -> Mat3 {
        Mat3::identity()
    }
}

/// Pushes a Gaussian through a smooth map by linearizing at the mean:
/// (f(mu), J Sigma J^T). The output covariance is symmetrized to absorb
/// floating-point asymmetry.
pub fn warp_gaussian(seg: &GaussianSegment, map: &impl SmoothMap) -> GaussianSegment {
    let j = map.jacobian(seg.mean);
    let cov = j * seg.cov * j.transpose();
    GaussianSegment::new_unchecked(map.apply(seg.mean), 0.5 * (cov + cov.transpose()))
}

/// One camera-to-world rigid transform.
#[derive(Debug, Clone)]
pub struct CameraPose {
    /// Camera-to-world rotation, columns are the camera axes in world space.
    pub rotation: Mat3,
    /// Camera position in world space.
    pub position: Vec3,
}

/// Shared pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub focal_px: f64,
    pub width: usize,
    pub height: usize,
}

/// A set of camera poses with shared intrinsics.
#[derive(Debug, Clone)]
pub struct PoseSet {
    pub poses: Vec<CameraPose>,
    pub intrinsics: Intrinsics,
}

impl PoseSet {
    /// Validates every rotation (orthonormal within 1e-8, determinant +1).
    pub fn new(poses: Vec<CameraPose>, intrinsics: Intrinsics) -> Result<Self> {
        if !(intrinsics.focal_px > 0.0) || intrinsics.width == 0 || intrinsics.height == 0 {
            return Err(Error::invalid("intrinsics must be positive"));
        }
        for (i, pose) in poses.iter().enumerate() {
            let r = &pose.rotation;
            let gram = r.transpose() * r;
            if (gram - Mat3::identity()).abs().max() > 1e-8 {
                return Err(Error::invalid(format!("pose {i}: rotation not orthonormal")));
            }
            if (r.determinant() - 1.0).abs() > 1e-8 {
                return Err(Error::invalid(format!("pose {i}: rotation determinant != +1")));
            }
            if !pose.position.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid(format!("pose {i}: non-finite position")));
            }
        }
        Ok(PoseSet { poses, intrinsics })
    }
}

/// Options for pixel ray generation that live outside the pose file.
#[derive(Debug, Clone, Copy)]
pub struct RayBounds {
    pub t_near: f64,
    pub t_far: f64,
}

/// Pixel footprint to cone radius conversion: pixel width in world units at
/// the image plane, scaled by 2/sqrt(12) to variance-match a square pixel.
pub fn pixel_base_radius(focal_px: f64) -> f64 {
    (1.0 / focal_px) * 2.0 / 12f64.sqrt()
}

/// Casts the pinhole ray through continuous pixel coordinates `(px, py)`
/// (pixel centers at half-integers). The principal point is the image center.
pub fn generate_ray(
    pose: &CameraPose,
    intrinsics: &Intrinsics,
    px: f64,
    py: f64,
    bounds: RayBounds,
) -> Result<Ray> {
    let w = intrinsics.width as f64;
    let h = intrinsics.height as f64;
    if !(0.0..=w).contains(&px) || !(0.0..=h).contains(&py) {
        return Err(Error::invalid(format!(
            "pixel ({px}, {py}) outside image bounds {w}x{h}"
        )));
    }
    let f = intrinsics.focal_px;
    // -z forward, +y up: image rows grow downwards, hence the sign flip on y.
    let dir_cam = Vec3::new((px - 0.5 * w) / f, -(py - 0.5 * h) / f, -1.0);
    let dir_world = (pose.rotation * dir_cam).normalize();
    Ray::new(
        pose.position,
        dir_world,
        pixel_base_radius(f),
        bounds.t_near,
        bounds.t_far,
    )
}

/// Recenters camera positions to zero mean, rotates so the smallest principal
/// component of the position cloud becomes the world up-axis (+z), and
/// rescales positions into the [-1, 1]^3 cube (at least one coordinate
/// touches +-1). Rejects pose sets with fewer than 3 cameras or collinear
/// positions.
pub fn normalize_poses(set: &PoseSet) -> Result<PoseSet> {
    let n = set.poses.len();
    if n < 3 {
        return Err(Error::invalid("pose normalization needs at least 3 cameras"));
    }
    let mean: Vec3 = set.poses.iter().map(|p| p.position).sum::<Vec3>() / n as f64;
    let mut scatter = Mat3::zeros();
    for p in &set.poses {
        let d = p.position - mean;
        scatter += d * d.transpose();
    }
    let eig = scatter.symmetric_eigen();
    // Sort principal axes by descending eigenvalue.
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    if eig.eigenvalues[order[1]] <= 1e-12 * eig.eigenvalues[order[0]].max(1e-300) {
        return Err(Error::invalid("camera positions are collinear"));
    }

    // Rows of the new basis: largest PC -> x, middle -> y, smallest -> z.
    let mut axes: Vec<Vec3> = order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
    for axis in axes.iter_mut() {
        // Deterministic sign: largest-magnitude component positive.
        let k = (0..3).max_by(|&a, &b| axis[a].abs().total_cmp(&axis[b].abs())).unwrap();
        if axis[k] < 0.0 {
            *axis = -*axis;
        }
    }
    let mut basis = Mat3::from_rows(&[axes[0].transpose(), axes[1].transpose(), axes[2].transpose()]);
    if basis.determinant() < 0.0 {
        basis.set_row(1, &(-axes[1]).transpose());
    }

    let mut poses: Vec<CameraPose> = set
        .poses
        .iter()
        .map(|p| CameraPose {
            rotation: basis * p.rotation,
            position: basis * (p.position - mean),
        })
        .collect();

    let max_abs = poses
        .iter()
        .flat_map(|p| p.position.iter().map(|v| v.abs()).collect::<Vec<_>>())
        .fold(0.0f64, f64::max);
    if max_abs <= 0.0 {
        return Err(Error::invalid("camera positions are all identical"));
    }
    for p in poses.iter_mut() {
        p.position /= max_abs;
    }
    PoseSet::new(poses, set.intrinsics)
}
