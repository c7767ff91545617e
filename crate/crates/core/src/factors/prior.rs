use nalgebra::{DMatrix, DVector};

use super::{Factor, FactorClass, Keyframe, ResidualBlock, Values, VarId};
use crate::basis::WeightVector;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Default standard deviation of the weight prior, so the information is
/// `I / 0.1^2`.
pub const DEFAULT_PRIOR_SIGMA: f64 = 0.1;

fn sqrt_information<T: Real>(information: &DMatrix<T>) -> Result<DMatrix<T>> {
    if !information.is_square() {
        return Err(Error::DimensionMismatch("information matrix is not square".into()));
    }
    let asym = (information - information.transpose()).amax();
    if asym > information.amax() * T::lit(1e-10) {
        return Err(Error::NotPositiveDefinite);
    }
    let l = information
        .clone()
        .cholesky()
        .ok_or(Error::NotPositiveDefinite)?
        .l();
    Ok(l.transpose())
}

fn whitened<T: Real>(sqrt_info_t: &DMatrix<T>, anchor: &DVector<T>, w: &DVector<T>, frame: usize, jac: bool) -> Result<ResidualBlock<T>> {
    if anchor.len() != w.len() || sqrt_info_t.nrows() != w.len() {
        return Err(Error::DimensionMismatch(format!(
            "prior of size {} on {} weights",
            anchor.len(),
            w.len()
        )));
    }
    let block = ResidualBlock::new(sqrt_info_t * (anchor - w));
    Ok(if jac {
        block.with_jacobian(VarId::Weights(frame), -sqrt_info_t)
    } else {
        block
    })
}

/// Prior residual `L^T (anchor - w)` with `information = L L^T`.
pub fn prior_weight_residual<T: Real>(
    frame: &Keyframe<T>,
    anchor: &WeightVector<T>,
    information: &DMatrix<T>,
) -> Result<ResidualBlock<T>> {
    let s = sqrt_information(information)?;
    whitened(&s, &anchor.0, &frame.weights.0, frame.id, true)
}

/// Graph form of [`prior_weight_residual`].
#[derive(Debug, Clone)]
pub struct PriorWeightFactor<T: Real> {
    pub frame: usize,
    pub anchor: DVector<T>,
    sqrt_info_t: DMatrix<T>,
}

impl<T: Real> PriorWeightFactor<T> {
    pub fn new(frame: usize, anchor: DVector<T>, information: &DMatrix<T>) -> Result<Self> {
        let sqrt_info_t = sqrt_information(information)?;
        if sqrt_info_t.nrows() != anchor.len() {
            return Err(Error::DimensionMismatch("prior anchor and information".into()));
        }
        Ok(Self { frame, anchor, sqrt_info_t })
    }

    /// Prior with information `I / sigma^2`.
    pub fn isotropic(frame: usize, anchor: DVector<T>, sigma: T) -> Result<Self> {
        if !(sigma > T::zero()) {
            return Err(Error::InvalidConfig("prior sigma must be positive".into()));
        }
        let n = anchor.len();
        Self::new(frame, anchor, &(DMatrix::identity(n, n) / (sigma * sigma)))
    }
}

impl<T: Real> Factor<T> for PriorWeightFactor<T> {
    fn keys(&self) -> Vec<VarId> {
        vec![VarId::Weights(self.frame)]
    }

    fn class(&self) -> FactorClass {
        FactorClass::PriorWeight
    }

    fn evaluate(&self, values: &Values<T>, need: &dyn Fn(VarId) -> bool) -> Result<ResidualBlock<T>> {
        let w = values.vector(VarId::Weights(self.frame))?;
        whitened(&self.sqrt_info_t, &self.anchor, w, self.frame, need(VarId::Weights(self.frame)))
    }
}
