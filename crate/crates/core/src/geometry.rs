//! Rigid and similarity transforms, pinhole projection and trajectory alignment.
//!
//! Conventions used throughout the crate:
//!
//! * Poses are world-to-camera: `X_cam = R * X_world + t`.
//! * Pixel coordinates are `(u, v) = (column, row)` with the origin at the
//!   centre of the top-left pixel, so integer coordinates are pixel centres.
//! * Pose tangent vectors are ordered `(rho, phi)`: translation part first,
//!   rotation part second. Increments are applied on the right,
//!   `T <- T * exp(delta)`.

use nalgebra::{Matrix3, Matrix3x6, UnitQuaternion, Vector2, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// The camera optical axis `(0, 0, 1)`, used to pick the depth component of
/// a camera-frame point.
pub fn z_axis<T: Real>() -> Vector3<T> {
    Vector3::new(T::zero(), T::zero(), T::one())
}

/// Skew-symmetric cross-product matrix of `v`.
pub fn skew<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    Matrix3::new(
        T::zero(),
        -v.z,
        v.y,
        v.z,
        T::zero(),
        -v.x,
        -v.y,
        v.x,
        T::zero(),
    )
}

/// Rotation matrix `exp([phi]x)` (Rodrigues).
pub fn so3_exp<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let (a, b) = if theta2 < T::lit(1e-10) {
        (
            T::one() - theta2 / T::lit(6.0),
            T::lit(0.5) - theta2 / T::lit(24.0),
        )
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (T::one() - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation vector of a rotation matrix.
pub fn so3_log<T: Real>(r: &Matrix3<T>) -> Vector3<T> {
    let q = UnitQuaternion::from_matrix(r);
    q.scaled_axis()
}

/// Left Jacobian of SO(3), the `V` matrix of the SE(3) exponential.
fn so3_left_jacobian<T: Real>(phi: &Vector3<T>) -> Matrix3<T> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let (b, c) = if theta2 < T::lit(1e-10) {
        (
            T::lit(0.5) - theta2 / T::lit(24.0),
            T::one() / T::lit(6.0) - theta2 / T::lit(120.0),
        )
    } else {
        let theta = theta2.sqrt();
        (
            (T::one() - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * b + k * k * c
}

/// Projects a nearly orthonormal matrix onto SO(3) (polar decomposition).
pub fn orthonormalize<T: Real>(m: &Matrix3<T>) -> Matrix3<T> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < T::zero() {
        d[(2, 2)] = -T::one();
    }
    u * d * v_t
}

/// Rigid-body transform, world-to-camera when used as a keyframe pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidPose<T: Real> {
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Default for RigidPose<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> RigidPose<T> {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, re-projecting `rotation` onto SO(3).
    pub fn new(rotation: Matrix3<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation: orthonormalize(&rotation),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<T>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_quaternion(q: &UnitQuaternion<T>, translation: Vector3<T>) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    pub fn quaternion(&self) -> UnitQuaternion<T> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    /// `self * other`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `R * p + t`.
    #[inline]
    pub fn transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p + self.translation
    }

    /// `R^T * (p - t)`.
    #[inline]
    pub fn inverse_transform_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation.transpose() * (p - self.translation)
    }

    /// SE(3) exponential of `(rho, phi)`.
    pub fn exp(delta: &Vector6<T>) -> Self {
        let rho = Vector3::new(delta[0], delta[1], delta[2]);
        let phi = Vector3::new(delta[3], delta[4], delta[5]);
        Self {
            rotation: so3_exp(&phi),
            translation: so3_left_jacobian(&phi) * rho,
        }
    }

    /// SE(3) logarithm, inverse of [`RigidPose::exp`].
    pub fn log(&self) -> Vector6<T> {
        let phi = so3_log(&self.rotation);
        let v = so3_left_jacobian(&phi);
        let rho = v
            .try_inverse()
            .map(|vi| vi * self.translation)
            .unwrap_or(self.translation);
        Vector6::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z)
    }

    /// Right-perturbation `self * exp(delta)`.
    pub fn retract(&self, delta: &Vector6<T>) -> Self {
        self.compose(&Self::exp(delta))
    }

    /// Tangent vector `delta` such that `other = self.retract(delta)`.
    pub fn local(&self, other: &Self) -> Vector6<T> {
        self.inverse().compose(other).log()
    }

    /// Camera centre in world coordinates for a world-to-camera pose.
    pub fn center(&self) -> Vector3<T> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Re-projects the rotation onto SO(3).
    pub fn renormalized(&self) -> Self {
        Self::new(self.rotation, self.translation)
    }

    /// Derivative of `self.retract(delta).transform_point(p)` at `delta = 0`.
    pub fn point_jacobian(&self, p: &Vector3<T>) -> Matrix3x6<T> {
        let mut j = Matrix3x6::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        j.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(-(self.rotation * skew(p))));
        j
    }

    /// Derivative of `self.retract(delta).inverse_transform_point(p)` at `delta = 0`.
    pub fn inverse_point_jacobian(&self, p: &Vector3<T>) -> Matrix3x6<T> {
        let x = self.inverse_transform_point(p);
        let mut j = Matrix3x6::zeros();
        j.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&(-Matrix3::<T>::identity()));
        j.fixed_view_mut::<3, 3>(0, 3).copy_from(&skew(&x));
        j
    }
}

/// Similarity transform `x -> s * R * x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimTransform<T: Real> {
    pub scale: T,
    pub rotation: Matrix3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> SimTransform<T> {
    pub fn identity() -> Self {
        Self {
            scale: T::one(),
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(scale: T, rotation: Matrix3<T>, translation: Vector3<T>) -> Result<Self> {
        if !(scale > T::zero()) || !scale.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "similarity scale must be positive, got {}",
                scale.as_f64()
            )));
        }
        Ok(Self {
            scale,
            rotation: orthonormalize(&rotation),
            translation,
        })
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p * self.scale + self.translation
    }

    pub fn apply_inverse(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation.transpose() * (p - self.translation) / self.scale
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        let inv_s = T::one() / self.scale;
        Self {
            scale: inv_s,
            rotation: rt,
            translation: -(rt * self.translation) * inv_s,
        }
    }

    /// `self * other`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            scale: self.scale * other.scale,
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation * self.scale + self.translation,
        }
    }
}

/// Pinhole intrinsics without distortion.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PinholeCamera<T: Real> {
    pub fx: T,
    pub fy: T,
    pub cx: T,
    pub cy: T,
    pub width: usize,
    pub height: usize,
}

impl<T: Real> PinholeCamera<T> {
    pub fn new(fx: T, fy: T, cx: T, cy: T, width: usize, height: usize) -> Result<Self> {
        let w = T::from_count(width);
        let h = T::from_count(height);
        if !(fx > T::zero() && fy > T::zero()) {
            return Err(Error::InvalidConfig("focal lengths must be positive".into()));
        }
        if !(cx > T::zero() && cx < w && cy > T::zero() && cy < h) {
            return Err(Error::InvalidConfig(
                "principal point must lie strictly inside the image".into(),
            ));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Projects a camera-frame point to pixel coordinates.
    pub fn project(&self, p: &Vector3<T>) -> Result<Vector2<T>> {
        if !(p.z > T::zero()) {
            return Err(Error::BehindCamera(p.z.as_f64()));
        }
        Ok(Vector2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Jacobian of [`PinholeCamera::project`] with respect to the point.
    pub fn project_jacobian(&self, p: &Vector3<T>) -> nalgebra::Matrix2x3<T> {
        let iz = T::one() / p.z;
        let iz2 = iz * iz;
        nalgebra::Matrix2x3::new(
            self.fx * iz,
            T::zero(),
            -self.fx * p.x * iz2,
            T::zero(),
            self.fy * iz,
            -self.fy * p.y * iz2,
        )
    }

    /// Viewing ray through `pixel` normalised to unit depth.
    #[inline]
    pub fn ray(&self, pixel: &Vector2<T>) -> Vector3<T> {
        Vector3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            T::one(),
        )
    }

    /// Inverse projection at the given depth (the returned point has `z == depth`).
    pub fn backproject(&self, pixel: &Vector2<T>, depth: T) -> Result<Vector3<T>> {
        if !(depth > T::zero()) || !depth.is_finite() {
            return Err(Error::InvalidDepth(depth.as_f64()));
        }
        if !self.contains(pixel) {
            return Err(Error::OutOfSupport(pixel.x.as_f64(), pixel.y.as_f64()));
        }
        let r = self.ray(pixel);
        Ok(Vector3::new(r.x * depth, r.y * depth, depth))
    }

    /// Whether `pixel` lies inside the image, i.e. inside the bilinear
    /// support `[0, W-1] x [0, H-1]`.
    #[inline]
    pub fn contains(&self, pixel: &Vector2<T>) -> bool {
        let max_u = T::from_count(self.width.saturating_sub(1));
        let max_v = T::from_count(self.height.saturating_sub(1));
        pixel.x >= T::zero() && pixel.y >= T::zero() && pixel.x <= max_u && pixel.y <= max_v
    }

    /// Converts the intrinsics to another scalar type.
    pub fn cast<U: Real>(&self) -> PinholeCamera<U> {
        PinholeCamera {
            fx: U::lit(self.fx.as_f64()),
            fy: U::lit(self.fy.as_f64()),
            cx: U::lit(self.cx.as_f64()),
            cy: U::lit(self.cy.as_f64()),
            width: self.width,
            height: self.height,
        }
    }
}

/// `R * X + t`.
pub fn transform_world_to_cam<T: Real>(pose: &RigidPose<T>, point_world: &Vector3<T>) -> Vector3<T> {
    pose.transform_point(point_world)
}

fn centroid<T: Real>(points: &[Vector3<T>]) -> Vector3<T> {
    let sum = points.iter().fold(Vector3::zeros(), |acc, p| acc + p);
    sum / T::from_count(points.len())
}

fn check_alignment_input<T: Real>(est: &[Vector3<T>], reference: &[Vector3<T>]) -> Result<()> {
    if est.len() != reference.len() {
        return Err(Error::DimensionMismatch(format!(
            "trajectory lengths {} and {}",
            est.len(),
            reference.len()
        )));
    }
    if est.len() < 3 {
        return Err(Error::RankDeficient(
            "alignment needs at least 3 associated positions".into(),
        ));
    }
    for pts in [est, reference] {
        let mu = centroid(pts);
        let cov = pts.iter().fold(Matrix3::zeros(), |acc, p| {
            let d = p - mu;
            acc + d * d.transpose()
        });
        let sv = cov.singular_values();
        let mut s: Vec<T> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        if !(s[0] > T::zero()) || s[1] <= s[0] * T::lit(1e-12) {
            return Err(Error::RankDeficient(
                "trajectory positions are collinear or duplicated".into(),
            ));
        }
    }
    Ok(())
}

fn umeyama<T: Real>(
    est: &[Vector3<T>],
    reference: &[Vector3<T>],
    with_scale: bool,
) -> Result<SimTransform<T>> {
    check_alignment_input(est, reference)?;
    let n = T::from_count(est.len());
    let mu_x = centroid(est);
    let mu_y = centroid(reference);
    let mut sigma = Matrix3::zeros();
    let mut var_x = T::zero();
    for (x, y) in est.iter().zip(reference) {
        let dx = x - mu_x;
        let dy = y - mu_y;
        sigma += dy * dx.transpose();
        var_x += dx.norm_squared();
    }
    sigma /= n;
    var_x /= n;
    let svd = sigma.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut s = Matrix3::<T>::identity();
    if u.determinant() * v_t.determinant() < T::zero() {
        s[(2, 2)] = -T::one();
    }
    let rotation = u * s * v_t;
    let scale = if with_scale {
        let d = svd.singular_values;
        (d[0] * s[(0, 0)] + d[1] * s[(1, 1)] + d[2] * s[(2, 2)]) / var_x
    } else {
        T::one()
    };
    let translation = mu_y - rotation * mu_x * scale;
    SimTransform::new(scale, rotation, translation)
}

/// Closed-form similarity minimising `sum |ref_k - (s R est_k + t)|^2`.
///
/// Positions are associated by index.
pub fn sim3_align<T: Real>(
    estimated_traj: &[Vector3<T>],
    reference_traj: &[Vector3<T>],
) -> Result<SimTransform<T>> {
    umeyama(estimated_traj, reference_traj, true)
}

/// Rigid (scale fixed to one) variant of [`sim3_align`].
pub fn se3_align<T: Real>(
    estimated_traj: &[Vector3<T>],
    reference_traj: &[Vector3<T>],
) -> Result<SimTransform<T>> {
    umeyama(estimated_traj, reference_traj, false)
}
