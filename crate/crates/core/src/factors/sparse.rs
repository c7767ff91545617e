use std::sync::Arc;

use nalgebra::{DMatrix, DVector, RowVector3, Vector3};

use super::{Factor, FactorClass, JacobianFlags, Keyframe, Landmark, ResidualBlock, Values, VarId};
use crate::basis::{sample_stack_bilinear, BasisStack};
use crate::error::{Error, Result};
use crate::geometry::{z_axis, PinholeCamera, RigidPose};
use crate::scalar::Real;

/// Depth residual of a point seen at `point_cam` through one frame's
/// stack, and its derivative with respect to the camera-frame point.
pub(super) struct DepthObservation<T: Real> {
    pub residual: T,
    /// Interpolated basis values at the projection.
    pub basis: DVector<T>,
    /// `d residual / d point_cam`.
    pub d_point: RowVector3<T>,
}

/// `r = z - b(pi(X))^T w`, with `d r / d X = e_z^T - (G w)^T J_pi`.
pub(super) fn observe_depth<T: Real>(
    camera: &PinholeCamera<T>,
    stack: &BasisStack<T>,
    w: &DVector<T>,
    point_cam: &Vector3<T>,
    with_point_jacobian: bool,
) -> Result<DepthObservation<T>> {
    if w.len() != stack.count() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} bases",
            w.len(),
            stack.count()
        )));
    }
    let pixel = camera.project(point_cam)?;
    let sample = sample_stack_bilinear(stack, &pixel)?;
    let residual = point_cam.dot(&z_axis()) - sample.values.dot(w);
    let d_point = if with_point_jacobian {
        let grad = &sample.gradient * w;
        let jp = camera.project_jacobian(point_cam);
        z_axis::<T>().transpose() - grad.transpose() * jp
    } else {
        RowVector3::zeros()
    };
    Ok(DepthObservation {
        residual,
        basis: sample.values,
        d_point,
    })
}

struct SparseEval<T: Real> {
    residual: T,
    d_weights: DVector<T>,
    d_pose: Option<DMatrix<T>>,
    d_landmark: Option<DMatrix<T>>,
}

fn evaluate_sparse<T: Real>(
    pose: &RigidPose<T>,
    camera: &PinholeCamera<T>,
    stack: &BasisStack<T>,
    w: &DVector<T>,
    point_world: &Vector3<T>,
    flags: JacobianFlags,
) -> Result<SparseEval<T>> {
    let xc = pose.transform_point(point_world);
    let obs = observe_depth(camera, stack, w, &xc, flags.pose || flags.landmark)?;
    let d_pose = flags
        .pose
        .then(|| DMatrix::from_row_slice(1, 6, (obs.d_point * pose.point_jacobian(point_world)).as_slice()));
    let d_landmark = flags
        .landmark
        .then(|| DMatrix::from_row_slice(1, 3, (obs.d_point * pose.rotation).as_slice()));
    Ok(SparseEval {
        residual: obs.residual,
        d_weights: -obs.basis,
        d_pose,
        d_landmark,
    })
}

fn into_block<T: Real>(e: SparseEval<T>, frame: usize, landmark: usize, flags: JacobianFlags) -> ResidualBlock<T> {
    let mut block = ResidualBlock::new(DVector::from_element(1, e.residual));
    if flags.weights {
        block = block.with_jacobian(VarId::Weights(frame), DMatrix::from_row_slice(1, e.d_weights.len(), e.d_weights.as_slice()));
    }
    if let Some(j) = e.d_pose {
        block = block.with_jacobian(VarId::Pose(frame), j);
    }
    if let Some(j) = e.d_landmark {
        block = block.with_jacobian(VarId::Landmark(landmark), j);
    }
    block
}

/// Sparse depth residual `z(R X + t) - D(pi(R X + t))^T w` of a landmark
/// in a keyframe.
///
/// Fails (the factor is culled) when the point is behind the camera or
/// projects outside the bilinear support.
pub fn sparse_depth_residual<T: Real>(
    frame: &Keyframe<T>,
    lm: &Landmark<T>,
    flags: JacobianFlags,
) -> Result<ResidualBlock<T>> {
    let e = evaluate_sparse(&frame.pose, &frame.camera, &frame.stack, &frame.weights.0, &lm.position_world, flags)?;
    Ok(into_block(e, frame.id, lm.id, flags))
}

/// Graph form of [`sparse_depth_residual`], reading the pose, weights and
/// landmark from the variable snapshot.
#[derive(Debug, Clone)]
pub struct SparseDepthFactor<T: Real> {
    pub frame: usize,
    pub landmark: usize,
    pub camera: PinholeCamera<T>,
    pub stack: Arc<BasisStack<T>>,
    /// Multiplies residual and Jacobians.
    pub weight: T,
}

impl<T: Real> SparseDepthFactor<T> {
    pub fn new(frame: usize, landmark: usize, camera: PinholeCamera<T>, stack: Arc<BasisStack<T>>) -> Self {
        Self {
            frame,
            landmark,
            camera,
            stack,
            weight: T::one(),
        }
    }

    pub fn with_weight(mut self, weight: T) -> Self {
        self.weight = weight;
        self
    }
}

impl<T: Real> Factor<T> for SparseDepthFactor<T> {
    fn keys(&self) -> Vec<VarId> {
        vec![VarId::Pose(self.frame), VarId::Weights(self.frame), VarId::Landmark(self.landmark)]
    }

    fn class(&self) -> FactorClass {
        FactorClass::SparseDepth
    }

    fn evaluate(&self, values: &Values<T>, need: &dyn Fn(VarId) -> bool) -> Result<ResidualBlock<T>> {
        let flags = JacobianFlags {
            weights: need(VarId::Weights(self.frame)),
            pose: need(VarId::Pose(self.frame)),
            landmark: need(VarId::Landmark(self.landmark)),
        };
        let pose = values.pose(VarId::Pose(self.frame))?;
        let w = values.vector(VarId::Weights(self.frame))?;
        let x = values.point(VarId::Landmark(self.landmark))?;
        let e = evaluate_sparse(pose, &self.camera, &self.stack, w, &x, flags)?;
        Ok(into_block(e, self.frame, self.landmark, flags).scaled(self.weight))
    }
}

#[cfg(test)]
mod tests {
    use super::super::test_support::*;
    use super::*;
    use crate::basis::{design_matrix, solve_weights, SparseDepthSet, SparsePoint, WeightVector};
    use crate::maps::{ConfidenceMap, Map};
    use nalgebra::{Vector2, Vector6};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_landmark(rng: &mut ChaCha8Rng, frame: &Keyframe<f64>, id: usize) -> Landmark<f64> {
        let px = Vector2::new(rng.random_range(2.0..37.0), rng.random_range(2.0..27.0));
        let xc = frame.camera.backproject(&px, rng.random_range(1.5..3.5)).unwrap();
        Landmark { id, position_world: frame.pose.inverse_transform_point(&xc) }
    }

    #[test]
    fn zero_residual_on_single_true_basis() {
        let cam = camera();
        let depth = Map::from_fn(40, 30, |x, y| 2.0 + 0.01 * x as f64 + 0.02 * y as f64);
        let stack = Arc::new(BasisStack::new(std::slice::from_ref(&depth)).unwrap());
        let frame = Keyframe::new(
            0,
            RigidPose::identity(),
            cam,
            stack,
            Arc::new(ConfidenceMap::uniform(40, 30, 1.0)),
            Arc::new(SparseDepthSet::default()),
            WeightVector::from_slice(&[1.0]),
        )
        .unwrap();
        for (x, y) in [(3usize, 4usize), (20, 10), (39, 29)] {
            let xc = cam.backproject(&Vector2::new(x as f64, y as f64), depth.get(x, y)).unwrap();
            let lm = Landmark { id: 0, position_world: xc };
            let b = sparse_depth_residual(&frame, &lm, JacobianFlags::NONE).unwrap();
            assert!(b.residual[0].abs() < 1e-12);
        }
    }

    #[test]
    fn culls_behind_camera_and_outside_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = keyframe(&mut rng, 0, RigidPose::identity());
        let behind = Landmark { id: 0, position_world: Vector3::new(0.0, 0.0, -1.0) };
        assert!(matches!(sparse_depth_residual(&frame, &behind, JacobianFlags::ALL), Err(Error::BehindCamera(_))));
        let outside = Landmark { id: 0, position_world: Vector3::new(10.0, 0.0, 1.0) };
        assert!(matches!(sparse_depth_residual(&frame, &outside, JacobianFlags::ALL), Err(Error::OutOfSupport(..))));
    }

    #[test]
    fn stationary_at_least_squares_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let frame = keyframe(&mut rng, 0, RigidPose::exp(&Vector6::new(0.1, -0.1, 0.05, 0.02, 0.01, -0.03)));
        let lms: Vec<_> = (0..40).map(|i| random_landmark(&mut rng, &frame, i)).collect();
        let pts: Vec<_> = lms
            .iter()
            .map(|lm| {
                let xc = frame.pose.transform_point(&lm.position_world);
                SparsePoint { pixel: frame.camera.project(&xc).unwrap(), depth: xc.z, landmark_id: Some(lm.id) }
            })
            .collect();
        let sparse = SparseDepthSet::new(pts, 40, 30).unwrap();
        let w = solve_weights(&frame.stack, &sparse, 0.0).unwrap();
        let mut f = frame.clone();
        f.weights = w;
        let r = DVector::from_iterator(
            lms.len(),
            lms.iter().map(|lm| sparse_depth_residual(&f, lm, JacobianFlags::NONE).unwrap().residual[0]),
        );
        let (b, _) = design_matrix(&f.stack, &sparse).unwrap();
        assert!((b.transpose() * r).amax() < 1e-8);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        while checked < 50 {
            let pose = RigidPose::exp(&Vector6::from_fn(|_, _| rng.random_range(-0.2..0.2)));
            let frame = keyframe(&mut rng, 0, pose);
            let lm = random_landmark(&mut rng, &frame, 7);
            let px = frame.camera.project(&frame.pose.transform_point(&lm.position_world)).unwrap();
            if !off_grid(&px, 0.01) {
                continue;
            }
            let b = sparse_depth_residual(&frame, &lm, JacobianFlags::ALL).unwrap();
            let h = 1e-6;
            let jw = numeric_jacobian(
                |d| {
                    let mut f = frame.clone();
                    f.weights.0 += DVector::from_column_slice(d);
                    sparse_depth_residual(&f, &lm, JacobianFlags::NONE).ok().map(|b| b.residual[0])
                },
                4,
                h,
            )
            .unwrap();
            let jp = numeric_jacobian(
                |d| {
                    let mut f = frame.clone();
                    f.pose = f.pose.retract(&Vector6::from_column_slice(d));
                    sparse_depth_residual(&f, &lm, JacobianFlags::NONE).ok().map(|b| b.residual[0])
                },
                6,
                h,
            )
            .unwrap();
            let jl = numeric_jacobian(
                |d| {
                    let mut l = lm;
                    l.position_world += Vector3::from_column_slice(d);
                    sparse_depth_residual(&frame, &l, JacobianFlags::NONE).ok().map(|b| b.residual[0])
                },
                3,
                h,
            )
            .unwrap();
            let flat = |id| DVector::from_column_slice(b.jacobian(id).unwrap().as_slice());
            assert!(rel_err(&flat(VarId::Weights(0)), &jw) < 1e-5);
            assert!(rel_err(&flat(VarId::Pose(0)), &jp) < 1e-5);
            assert!(rel_err(&flat(VarId::Landmark(7)), &jl) < 1e-5);
            checked += 1;
        }
    }

    #[test]
    fn graph_factor_matches_free_function() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frame = keyframe(&mut rng, 3, RigidPose::identity());
        let lm = random_landmark(&mut rng, &frame, 11);
        let mut values = Values::new();
        values.insert_pose(3, frame.pose);
        values.insert_weights(3, frame.weights.0.clone());
        values.insert_landmark(11, lm.position_world);
        let factor = SparseDepthFactor::new(3, 11, frame.camera, frame.stack.clone()).with_weight(2.0);
        let a = factor.evaluate(&values, &|id| matches!(id, VarId::Weights(_))).unwrap();
        let b = sparse_depth_residual(&frame, &lm, JacobianFlags::WEIGHTS).unwrap();
        assert_eq!(a.residual[0], 2.0 * b.residual[0]);
        assert_eq!(a.jacobians.len(), 1);
        assert_eq!(a.jacobian(VarId::Weights(3)).unwrap(), &(b.jacobian(VarId::Weights(3)).unwrap() * 2.0));
    }
}
