use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector2};

use super::sparse::observe_depth;
use super::{Factor, FactorClass, JacobianFlags, Keyframe, ResidualBlock, SamplePoint, Values, VarId};
use crate::basis::{sample_stack_values, BasisStack};
use crate::error::{Error, Result};
use crate::geometry::{PinholeCamera, RigidPose};
use crate::scalar::Real;

struct FrameView<'a, T: Real> {
    id: usize,
    pose: &'a RigidPose<T>,
    camera: &'a PinholeCamera<T>,
    stack: &'a BasisStack<T>,
    w: &'a DVector<T>,
}

/// Backprojects `pixel` of frame `i` at its composed depth, moves the point
/// into frame `j` and compares its depth there with frame `j`'s composed
/// depth at the reprojection.
fn evaluate_relative<T: Real>(
    fi: &FrameView<'_, T>,
    fj: &FrameView<'_, T>,
    pixel: &Vector2<T>,
    weight: T,
    flags_i: JacobianFlags,
    flags_j: JacobianFlags,
) -> Result<ResidualBlock<T>> {
    if fi.w.len() != fi.stack.count() {
        return Err(Error::DimensionMismatch("host weights".into()));
    }
    let bi = sample_stack_values(fi.stack, pixel)?;
    let di = bi.dot(fi.w);
    if !(di > T::zero()) {
        return Err(Error::InvalidDepth(di.as_f64()));
    }
    let ray = fi.camera.ray(pixel);
    let xci = ray * di;
    let xw = fi.pose.inverse_transform_point(&xci);
    let xcj = fj.pose.transform_point(&xw);
    let need_point = flags_i.weights || flags_i.pose || flags_j.pose;
    let obs = observe_depth(fj.camera, fj.stack, fj.w, &xcj, need_point)?;

    let mut block = ResidualBlock::new(DVector::from_element(1, obs.residual));
    if flags_i.weights {
        let dd = (obs.d_point * fj.pose.rotation * fi.pose.rotation.transpose() * ray)[(0, 0)];
        let j = bi.transpose() * dd;
        block = block.with_jacobian(VarId::Weights(fi.id), DMatrix::from_row_slice(1, j.len(), j.as_slice()));
    }
    if flags_i.pose {
        let j = obs.d_point * fj.pose.rotation * fi.pose.inverse_point_jacobian(&xci);
        block = block.with_jacobian(VarId::Pose(fi.id), DMatrix::from_row_slice(1, 6, j.as_slice()));
    }
    if flags_j.weights {
        block = block.with_jacobian(
            VarId::Weights(fj.id),
            DMatrix::from_row_slice(1, obs.basis.len(), (-&obs.basis).as_slice()),
        );
    }
    if flags_j.pose {
        let j = obs.d_point * fj.pose.point_jacobian(&xw);
        block = block.with_jacobian(VarId::Pose(fj.id), DMatrix::from_row_slice(1, 6, j.as_slice()));
    }
    Ok(block.scaled(weight))
}

/// Relative depth residual of a host-frame sample observed in `frame_j`,
/// scaled by `min(1, sample.confidence)`.
///
/// Fails (the factor is culled) when the host depth is not positive, the
/// transferred point is behind camera `j`, or it reprojects outside `j`'s
/// bilinear support.
pub fn relative_depth_residual<T: Real>(
    frame_i: &Keyframe<T>,
    frame_j: &Keyframe<T>,
    sample: &SamplePoint<T>,
    flags: JacobianFlags,
) -> Result<ResidualBlock<T>> {
    let fi = FrameView {
        id: frame_i.id,
        pose: &frame_i.pose,
        camera: &frame_i.camera,
        stack: &frame_i.stack,
        w: &frame_i.weights.0,
    };
    let fj = FrameView {
        id: frame_j.id,
        pose: &frame_j.pose,
        camera: &frame_j.camera,
        stack: &frame_j.stack,
        w: &frame_j.weights.0,
    };
    let weight = sample.confidence.min(T::one());
    evaluate_relative(&fi, &fj, &sample.pixel, weight, flags, flags)
}

/// Graph form of [`relative_depth_residual`].
#[derive(Debug, Clone)]
pub struct RelativeDepthFactor<T: Real> {
    pub host: usize,
    pub target: usize,
    pub pixel: Vector2<T>,
    pub host_camera: PinholeCamera<T>,
    pub target_camera: PinholeCamera<T>,
    pub host_stack: Arc<BasisStack<T>>,
    pub target_stack: Arc<BasisStack<T>>,
    /// Multiplies residual and Jacobians.
    pub weight: T,
}

impl<T: Real> RelativeDepthFactor<T> {
    /// Factor between `host` and `target` at `sample`, weighted by
    /// `min(1, sample.confidence)`.
    pub fn new(host: &Keyframe<T>, target: &Keyframe<T>, sample: &SamplePoint<T>) -> Self {
        Self {
            host: host.id,
            target: target.id,
            pixel: sample.pixel,
            host_camera: host.camera,
            target_camera: target.camera,
            host_stack: host.stack.clone(),
            target_stack: target.stack.clone(),
            weight: sample.confidence.min(T::one()),
        }
    }

    pub fn with_weight(mut self, weight: T) -> Self {
        self.weight = weight;
        self
    }
}

impl<T: Real> Factor<T> for RelativeDepthFactor<T> {
    fn keys(&self) -> Vec<VarId> {
        vec![
            VarId::Pose(self.host),
            VarId::Weights(self.host),
            VarId::Pose(self.target),
            VarId::Weights(self.target),
        ]
    }

    fn class(&self) -> FactorClass {
        FactorClass::RelativeDepth
    }

    fn evaluate(&self, values: &Values<T>, need: &dyn Fn(VarId) -> bool) -> Result<ResidualBlock<T>> {
        let fi = FrameView {
            id: self.host,
            pose: values.pose(VarId::Pose(self.host))?,
            camera: &self.host_camera,
            stack: &self.host_stack,
            w: values.vector(VarId::Weights(self.host))?,
        };
        let fj = FrameView {
            id: self.target,
            pose: values.pose(VarId::Pose(self.target))?,
            camera: &self.target_camera,
            stack: &self.target_stack,
            w: values.vector(VarId::Weights(self.target))?,
        };
        let flags = |f: usize| JacobianFlags {
            weights: need(VarId::Weights(f)),
            pose: need(VarId::Pose(f)),
            landmark: false,
        };
        evaluate_relative(&fi, &fj, &self.pixel, self.weight, flags(self.host), flags(self.target))
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;
    use nalgebra::Vector6;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(rng: &mut ChaCha8Rng) -> (Keyframe<f64>, Keyframe<f64>) {
        let pi = RigidPose::exp(&Vector6::from_fn(|_, _| rng.random_range(-0.1..0.1)));
        let rel = RigidPose::exp(&Vector6::new(
            rng.random_range(-0.15..0.15),
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.1..0.1),
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
            rng.random_range(-0.05..0.05),
        ));
        let fi = keyframe(rng, 0, pi);
        let fj = keyframe(rng, 1, rel.compose(&pi));
        (fi, fj)
    }

    fn sample(rng: &mut ChaCha8Rng) -> SamplePoint<f64> {
        SamplePoint {
            host_frame: 0,
            pixel: Vector2::new(rng.random_range(8.0..31.0), rng.random_range(6.0..23.0)),
            confidence: rng.random_range(0.5..1.5),
        }
    }

    #[test]
    fn self_pair_is_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (fi, _) = pair(&mut rng);
        for _ in 0..20 {
            let s = sample(&mut rng);
            let b = relative_depth_residual(&fi, &fi, &s, JacobianFlags::NONE).unwrap();
            assert!(b.residual[0].abs() < 1e-12);
        }
    }

    #[test]
    fn culls_invalid_host_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut fi, fj) = pair(&mut rng);
        fi.weights.0 *= -1.0;
        let s = sample(&mut rng);
        assert!(matches!(
            relative_depth_residual(&fi, &fj, &s, JacobianFlags::ALL),
            Err(Error::InvalidDepth(_))
        ));
    }

    #[test]
    fn confidence_scales_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (fi, fj) = pair(&mut rng);
        let mut s = sample(&mut rng);
        s.confidence = 1.0;
        let full = relative_depth_residual(&fi, &fj, &s, JacobianFlags::NONE).unwrap();
        s.confidence = 0.25;
        let low = relative_depth_residual(&fi, &fj, &s, JacobianFlags::NONE).unwrap();
        assert!((low.residual[0] - 0.25 * full.residual[0]).abs() < 1e-15);
        s.confidence = 3.0;
        let high = relative_depth_residual(&fi, &fj, &s, JacobianFlags::NONE).unwrap();
        assert_eq!(high.residual[0], full.residual[0]);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut checked = 0;
        let h = 1e-6;
        while checked < 50 {
            let (fi, fj) = pair(&mut rng);
            let s = sample(&mut rng);
            let Ok(b) = relative_depth_residual(&fi, &fj, &s, JacobianFlags::ALL) else { continue };
            let r = |a: &Keyframe<f64>, c: &Keyframe<f64>| {
                relative_depth_residual(a, c, &s, JacobianFlags::NONE).ok().map(|b| b.residual[0])
            };
            let jwi = numeric_jacobian(|d| { let mut a = fi.clone(); a.weights.0 += DVector::from_column_slice(d); r(&a, &fj) }, 4, h);
            let jwj = numeric_jacobian(|d| { let mut c = fj.clone(); c.weights.0 += DVector::from_column_slice(d); r(&fi, &c) }, 4, h);
            let jpi = numeric_jacobian(|d| { let mut a = fi.clone(); a.pose = a.pose.retract(&Vector6::from_column_slice(d)); r(&a, &fj) }, 6, h);
            let jpj = numeric_jacobian(|d| { let mut c = fj.clone(); c.pose = c.pose.retract(&Vector6::from_column_slice(d)); r(&fi, &c) }, 6, h);
            let (Some(jwi), Some(jwj), Some(jpi), Some(jpj)) = (jwi, jwj, jpi, jpj) else { continue };
            // Keep both sampling locations clear of cell boundaries.
            let xcj = fj.pose.transform_point(&fi.pose.inverse_transform_point(
                &(fi.camera.ray(&s.pixel) * sample_stack_values(&fi.stack, &s.pixel).unwrap().dot(&fi.weights.0)),
            ));
            if !off_grid(&fj.camera.project(&xcj).unwrap(), 0.01) || !off_grid(&s.pixel, 0.01) {
                continue;
            }
            let flat = |id| DVector::from_column_slice(b.jacobian(id).unwrap().as_slice());
            assert!(rel_err(&flat(VarId::Weights(0)), &jwi) < 1e-5);
            assert!(rel_err(&flat(VarId::Weights(1)), &jwj) < 1e-5);
            assert!(rel_err(&flat(VarId::Pose(0)), &jpi) < 1e-5);
            assert!(rel_err(&flat(VarId::Pose(1)), &jpj) < 1e-5);
            checked += 1;
        }
    }

    #[test]
    fn graph_factor_matches_free_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (fi, fj) = pair(&mut rng);
        let s = sample(&mut rng);
        let mut values = Values::new();
        for f in [&fi, &fj] {
            values.insert_pose(f.id, f.pose);
            values.insert_weights(f.id, f.weights.0.clone());
        }
        let factor = RelativeDepthFactor::new(&fi, &fj, &s);
        let a = factor.evaluate(&values, &|_| true).unwrap();
        let b = relative_depth_residual(&fi, &fj, &s, JacobianFlags::ALL).unwrap();
        assert_eq!(a, b);
        let only_wj = factor.evaluate(&values, &|id| id == VarId::Weights(1)).unwrap();
        assert_eq!(only_wj.jacobians.len(), 1);
        assert_eq!(only_wj.residual, b.residual);
    }
}
