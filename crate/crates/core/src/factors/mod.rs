//! Depth-weight factors: residuals and analytic Jacobians over poses,
//! weight vectors and landmarks, plus the sample selector feeding the
//! relative factor.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Vector3};

use crate::basis::{BasisStack, SparseDepthSet, WeightVector};
use crate::error::{Error, Result};
use crate::geometry::{PinholeCamera, RigidPose};
use crate::maps::ConfidenceMap;
use crate::scalar::Real;

mod pose_prior;
mod prior;
mod relative;
mod sampling;
mod sparse;

pub use pose_prior::PosePriorFactor;
pub use prior::{prior_weight_residual, PriorWeightFactor, DEFAULT_PRIOR_SIGMA};
pub use relative::{relative_depth_residual, RelativeDepthFactor};
pub use sampling::{grid_shape, sample_relative_points, sample_relative_points_with, SamplerOptions, DEFAULT_CONFIDENCE_GATE};
pub use sparse::{sparse_depth_residual, SparseDepthFactor};

/// Identifier of an optimization variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarId {
    /// SE(3) pose of a keyframe, 6 tangent dimensions.
    Pose(usize),
    /// Basis weights of a keyframe.
    Weights(usize),
    /// World position of a landmark.
    Landmark(usize),
    /// Plain Euclidean vector, used for linear test problems.
    Generic(usize),
}

impl fmt::Display for VarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VarId::Pose(i) => write!(f, "pose:{i}"),
            VarId::Weights(i) => write!(f, "weights:{i}"),
            VarId::Landmark(i) => write!(f, "landmark:{i}"),
            VarId::Generic(i) => write!(f, "x:{i}"),
        }
    }
}

/// Value of a variable.
#[derive(Debug, Clone, PartialEq)]
pub enum Value<T: Real> {
    Pose(RigidPose<T>),
    Vector(DVector<T>),
}

impl<T: Real> Value<T> {
    /// Tangent dimension.
    pub fn dim(&self) -> usize {
        match self {
            Value::Pose(_) => 6,
            Value::Vector(v) => v.len(),
        }
    }

    /// Applies a tangent increment (right perturbation for poses).
    pub fn retract(&self, delta: &[T]) -> Self {
        match self {
            Value::Pose(p) => {
                let d = nalgebra::Vector6::from_column_slice(delta);
                Value::Pose(p.retract(&d))
            }
            Value::Vector(v) => Value::Vector(v + DVector::from_column_slice(delta)),
        }
    }

    /// Tangent vector taking `self` to `other`.
    pub fn local(&self, other: &Self) -> Result<DVector<T>> {
        match (self, other) {
            (Value::Pose(a), Value::Pose(b)) => Ok(DVector::from_column_slice(a.local(b).as_slice())),
            (Value::Vector(a), Value::Vector(b)) if a.len() == b.len() => Ok(b - a),
            _ => Err(Error::DimensionMismatch("incompatible variable values".into())),
        }
    }
}

/// Snapshot of every variable value.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Values<T: Real> {
    entries: BTreeMap<VarId, Value<T>>,
}

impl<T: Real> Values<T> {
    pub fn new() -> Self {
        Self { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, id: VarId, value: Value<T>) {
        self.entries.insert(id, value);
    }

    pub fn insert_pose(&mut self, frame: usize, pose: RigidPose<T>) {
        self.insert(VarId::Pose(frame), Value::Pose(pose));
    }

    pub fn insert_weights(&mut self, frame: usize, w: DVector<T>) {
        self.insert(VarId::Weights(frame), Value::Vector(w));
    }

    pub fn insert_landmark(&mut self, id: usize, p: Vector3<T>) {
        self.insert(VarId::Landmark(id), Value::Vector(DVector::from_column_slice(p.as_slice())));
    }

    pub fn remove(&mut self, id: &VarId) -> Option<Value<T>> {
        self.entries.remove(id)
    }

    pub fn get(&self, id: &VarId) -> Option<&Value<T>> {
        self.entries.get(id)
    }

    pub fn contains(&self, id: &VarId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn pose(&self, id: VarId) -> Result<&RigidPose<T>> {
        match self.entries.get(&id) {
            Some(Value::Pose(p)) => Ok(p),
            _ => Err(Error::UnknownVariable(id.to_string())),
        }
    }

    pub fn vector(&self, id: VarId) -> Result<&DVector<T>> {
        match self.entries.get(&id) {
            Some(Value::Vector(v)) => Ok(v),
            _ => Err(Error::UnknownVariable(id.to_string())),
        }
    }

    pub fn point(&self, id: VarId) -> Result<Vector3<T>> {
        let v = self.vector(id)?;
        if v.len() != 3 {
            return Err(Error::DimensionMismatch(format!("{id} is not a 3-vector")));
        }
        Ok(Vector3::new(v[0], v[1], v[2]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VarId, &Value<T>)> {
        self.entries.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &VarId> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Kind of factor, used to group robust-kernel statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FactorClass {
    SparseDepth,
    RelativeDepth,
    PriorWeight,
    PosePrior,
    MarginalPrior,
    Linear,
}

impl FactorClass {
    /// Whether the robust kernel applies to this class.
    pub fn is_robust(self) -> bool {
        matches!(self, FactorClass::SparseDepth | FactorClass::RelativeDepth | FactorClass::Linear)
    }
}

/// Residual of one factor together with its Jacobian blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<T: Real> {
    pub residual: DVector<T>,
    /// One `dim(residual) x dim(variable)` block per differentiated variable.
    pub jacobians: Vec<(VarId, DMatrix<T>)>,
    /// IRLS weight set by the optimizer; 1 when unrobustified.
    pub robust_weight: T,
}

impl<T: Real> ResidualBlock<T> {
    pub fn new(residual: DVector<T>) -> Self {
        Self {
            residual,
            jacobians: Vec::new(),
            robust_weight: T::one(),
        }
    }

    /// Adds a Jacobian block, summing into an existing block for `id`.
    pub fn with_jacobian(mut self, id: VarId, j: DMatrix<T>) -> Self {
        match self.jacobians.iter_mut().find(|(k, _)| *k == id) {
            Some((_, existing)) => *existing += j,
            None => self.jacobians.push((id, j)),
        }
        self
    }

    pub fn jacobian(&self, id: VarId) -> Option<&DMatrix<T>> {
        self.jacobians.iter().find(|(k, _)| *k == id).map(|(_, j)| j)
    }

    pub fn squared_norm(&self) -> T {
        self.residual.norm_squared()
    }

    fn scaled(mut self, s: T) -> Self {
        self.residual *= s;
        for (_, j) in &mut self.jacobians {
            *j *= s;
        }
        self
    }
}

/// A residual term of the least-squares problem.
///
/// `evaluate` returns an error when the factor's preconditions fail at the
/// given values; the optimizer treats that as a cull for the iteration.
pub trait Factor<T: Real>: Send + Sync + fmt::Debug {
    fn keys(&self) -> Vec<VarId>;

    fn class(&self) -> FactorClass;

    /// Residual and the Jacobians for every key where `need(key)` is true.
    fn evaluate(&self, values: &Values<T>, need: &dyn Fn(VarId) -> bool) -> Result<ResidualBlock<T>>;
}

/// Which optional Jacobian blocks to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JacobianFlags {
    pub weights: bool,
    pub pose: bool,
    pub landmark: bool,
}

impl JacobianFlags {
    pub const ALL: Self = Self { weights: true, pose: true, landmark: true };
    pub const WEIGHTS: Self = Self { weights: true, pose: false, landmark: false };
    pub const NONE: Self = Self { weights: false, pose: false, landmark: false };
}

/// A keyframe as seen by the factors.
#[derive(Debug, Clone)]
pub struct Keyframe<T: Real> {
    pub id: usize,
    /// World-to-camera pose.
    pub pose: RigidPose<T>,
    pub camera: PinholeCamera<T>,
    pub stack: Arc<BasisStack<T>>,
    pub confidence: Arc<ConfidenceMap<T>>,
    pub sparse: Arc<SparseDepthSet<T>>,
    pub weights: WeightVector<T>,
}

impl<T: Real> Keyframe<T> {
    pub fn new(
        id: usize,
        pose: RigidPose<T>,
        camera: PinholeCamera<T>,
        stack: Arc<BasisStack<T>>,
        confidence: Arc<ConfidenceMap<T>>,
        sparse: Arc<SparseDepthSet<T>>,
        weights: WeightVector<T>,
    ) -> Result<Self> {
        if stack.width() != camera.width || stack.height() != camera.height {
            return Err(Error::DimensionMismatch("basis stack and camera size".into()));
        }
        if confidence.values().width() != camera.width || confidence.values().height() != camera.height {
            return Err(Error::DimensionMismatch("confidence map and camera size".into()));
        }
        if weights.len() != stack.count() {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} bases",
                weights.len(),
                stack.count()
            )));
        }
        Ok(Self { id, pose, camera, stack, confidence, sparse, weights })
    }
}

/// A map point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark<T: Real> {
    pub id: usize,
    pub position_world: Vector3<T>,
}

/// A pixel of a host frame selected for relative-depth factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplePoint<T: Real> {
    pub host_frame: usize,
    pub pixel: nalgebra::Vector2<T>,
    pub confidence: T,
}
