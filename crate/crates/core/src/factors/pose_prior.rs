use nalgebra::{DMatrix, DVector, Vector6};

use super::{Factor, FactorClass, ResidualBlock, Values, VarId};
use crate::error::{Error, Result};
use crate::geometry::RigidPose;
use crate::scalar::Real;

/// Tracking prior on a keyframe pose: `diag(1/sigma) * Log(anchor^-1 * T)`
/// with `sigma = (translation x3, rotation x3)`.
#[derive(Debug, Clone)]
pub struct PosePriorFactor<T: Real> {
    pub frame: usize,
    pub anchor: RigidPose<T>,
    inv_sigma: Vector6<T>,
}

impl<T: Real> PosePriorFactor<T> {
    pub fn new(frame: usize, anchor: RigidPose<T>, rotation_sigma: T, translation_sigma: T) -> Result<Self> {
        if !(rotation_sigma > T::zero() && translation_sigma > T::zero()) {
            return Err(Error::InvalidConfig("pose prior sigmas must be positive".into()));
        }
        let (a, b) = (T::one() / translation_sigma, T::one() / rotation_sigma);
        Ok(Self { frame, anchor, inv_sigma: Vector6::new(a, a, a, b, b, b) })
    }

    fn whitened(&self, pose: &RigidPose<T>) -> Vector6<T> {
        self.anchor.local(pose).component_mul(&self.inv_sigma)
    }
}

impl<T: Real> Factor<T> for PosePriorFactor<T> {
    fn keys(&self) -> Vec<VarId> {
        vec![VarId::Pose(self.frame)]
    }

    fn class(&self) -> FactorClass {
        FactorClass::PosePrior
    }

    fn evaluate(&self, values: &Values<T>, need: &dyn Fn(VarId) -> bool) -> Result<ResidualBlock<T>> {
        let id = VarId::Pose(self.frame);
        let pose = values.pose(id)?;
        let r = self.whitened(pose);
        let block = ResidualBlock::new(DVector::from_column_slice(r.as_slice()));
        if !need(id) {
            return Ok(block);
        }
        // Central differences of the SE(3) logarithm under right perturbation.
        let h = T::default_epsilon().cbrt();
        let mut j = DMatrix::zeros(6, 6);
        for k in 0..6 {
            let mut d = Vector6::zeros();
            d[k] = h;
            let col = (self.whitened(&pose.retract(&d)) - self.whitened(&pose.retract(&-d))) / (h + h);
            j.set_column(k, &col);
        }
        Ok(block.with_jacobian(id, j))
    }
}
