//! Training-loss surrogates: depth consistency, confidence, and the
//! condition-number based bases-balance loss, with analytic gradients.

use nalgebra::{DMatrix, DVector};

use crate::basis::{design_matrix, BasisStack, SparseDepthSet};
use crate::error::{Error, Result};
use crate::maps::{ConfidenceMap, DepthMap, Map};
use crate::scalar::Real;

/// Relative weights of the loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<T> {
    /// Weight of the confidence loss.
    pub w_c: T,
    /// Weight of the balance loss.
    pub w_b: T,
    /// Weight of the `1 / (C + 1)` confidence floor term.
    pub w_0: T,
}

impl<T: Real> Default for LossWeights<T> {
    fn default() -> Self {
        Self {
            w_c: T::lit(2.0),
            w_b: T::lit(0.1),
            w_0: T::lit(0.1),
        }
    }
}

impl<T: Real> LossWeights<T> {
    pub fn new(w_c: T, w_b: T, w_0: T) -> Result<Self> {
        if w_c < T::zero() || w_b < T::zero() || w_0 < T::zero() {
            return Err(Error::InvalidConfig("loss weights must be non-negative".into()));
        }
        Ok(Self { w_c, w_b, w_0 })
    }
}

/// Per-pixel penalty applied to depth errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossNorm {
    /// Mean absolute error.
    #[default]
    L1,
    /// Mean squared error.
    L2,
}

impl LossNorm {
    #[inline]
    fn apply<T: Real>(self, e: T) -> T {
        match self {
            LossNorm::L1 => e.abs(),
            LossNorm::L2 => e * e,
        }
    }
}

fn valid_errors<T: Real>(pred: &DepthMap<T>, gt: &DepthMap<T>) -> Result<Vec<Option<T>>> {
    let mask = pred.joint_mask(gt)?;
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyMask);
    }
    Ok(mask
        .iter()
        .zip(gt.values().as_slice().iter().zip(pred.values().as_slice()))
        .map(|(&m, (&g, &p))| m.then_some(g - p))
        .collect())
}

/// Mean absolute depth error over the joint validity mask.
pub fn depth_loss<T: Real>(pred: &DepthMap<T>, gt: &DepthMap<T>) -> Result<T> {
    depth_loss_with(pred, gt, LossNorm::L1)
}

pub fn depth_loss_with<T: Real>(pred: &DepthMap<T>, gt: &DepthMap<T>, norm: LossNorm) -> Result<T> {
    let errs = valid_errors(pred, gt)?;
    let (sum, n) = errs
        .iter()
        .flatten()
        .fold((T::zero(), 0usize), |(s, n), &e| (s + norm.apply(e), n + 1));
    Ok(sum / T::from_count(n))
}

fn check_conf_shape<T: Real>(pred: &DepthMap<T>, conf: &ConfidenceMap<T>) -> Result<()> {
    if !pred.values().same_shape(conf.values()) {
        return Err(Error::DimensionMismatch("confidence map size".into()));
    }
    Ok(())
}

/// `mean(|err| * C) + w_0 * mean(1 / (C + 1))` over valid pixels.
pub fn confidence_loss<T: Real>(
    pred: &DepthMap<T>,
    gt: &DepthMap<T>,
    conf: &ConfidenceMap<T>,
    w_0: T,
) -> Result<T> {
    confidence_loss_with(pred, gt, conf, w_0, LossNorm::L1)
}

pub fn confidence_loss_with<T: Real>(
    pred: &DepthMap<T>,
    gt: &DepthMap<T>,
    conf: &ConfidenceMap<T>,
    w_0: T,
    norm: LossNorm,
) -> Result<T> {
    check_conf_shape(pred, conf)?;
    let errs = valid_errors(pred, gt)?;
    let mut weighted = T::zero();
    let mut floor = T::zero();
    let mut n = 0usize;
    for (e, &c) in errs.iter().zip(conf.values().as_slice()) {
        if let Some(e) = e {
            weighted += norm.apply(*e) * c;
            floor += T::one() / (c + T::one());
            n += 1;
        }
    }
    let n = T::from_count(n);
    Ok(weighted / n + w_0 * floor / n)
}

/// Per-pixel derivative of [`confidence_loss`] with respect to `C`.
/// Masked-out pixels have zero gradient.
pub fn confidence_loss_gradient<T: Real>(
    pred: &DepthMap<T>,
    gt: &DepthMap<T>,
    conf: &ConfidenceMap<T>,
    w_0: T,
) -> Result<Map<T>> {
    check_conf_shape(pred, conf)?;
    let errs = valid_errors(pred, gt)?;
    let n = T::from_count(errs.iter().flatten().count());
    let data = errs
        .iter()
        .zip(conf.values().as_slice())
        .map(|(e, &c)| match e {
            Some(e) => {
                let cp1 = c + T::one();
                (e.abs() - w_0 / (cp1 * cp1)) / n
            }
            None => T::zero(),
        })
        .collect();
    Map::new(pred.width(), pred.height(), data)
}

struct Spectrum<T: Real> {
    lo: T,
    hi: T,
    v_lo: DVector<T>,
    v_hi: DVector<T>,
    /// Smallest gap between an extreme eigenvalue and its neighbour.
    gap: T,
}

fn spectrum<T: Real>(gram: &DMatrix<T>) -> Spectrum<T> {
    let eig = gram.clone().symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let lo_i = order[0];
    let hi_i = order[n - 1];
    let gap = if n >= 2 {
        let g_lo = eig.eigenvalues[order[1]] - eig.eigenvalues[lo_i];
        let g_hi = eig.eigenvalues[hi_i] - eig.eigenvalues[order[n - 2]];
        if g_lo < g_hi {
            g_lo
        } else {
            g_hi
        }
    } else {
        T::zero()
    };
    Spectrum {
        lo: eig.eigenvalues[lo_i],
        hi: eig.eigenvalues[hi_i],
        v_lo: eig.eigenvectors.column(lo_i).into_owned(),
        v_hi: eig.eigenvectors.column(hi_i).into_owned(),
        gap,
    }
}

/// `log lambda_max(B^T B) - log lambda_min(B^T B)` of a sampled basis matrix.
pub fn balance_loss_of_matrix<T: Real>(b: &DMatrix<T>) -> Result<T> {
    let s = spectrum(&(b.transpose() * b));
    if !(s.lo > s.hi * T::lit(1e-12)) {
        return Err(Error::SingularSystem(
            "sampled Gram matrix is numerically singular".into(),
        ));
    }
    Ok((s.hi.ln() - s.lo.ln()).max(T::zero()))
}

/// Balance loss of a sampled basis matrix and its gradient with respect to
/// every entry of that matrix.
///
/// With `G = v_max v_max^T / l_max - v_min v_min^T / l_min`, the gradient is
/// `2 B G`. Requires simple extreme eigenvalues.
pub fn balance_loss_gradient_of_matrix<T: Real>(b: &DMatrix<T>) -> Result<(T, DMatrix<T>)> {
    let s = spectrum(&(b.transpose() * b));
    if !(s.lo > s.hi * T::lit(1e-12)) {
        return Err(Error::GradientUndefined("lambda_min is numerically zero".into()));
    }
    if b.ncols() < 2 || s.gap <= s.hi * T::lit(1e-9) {
        return Err(Error::GradientUndefined(
            "extreme eigenvalue is repeated".into(),
        ));
    }
    let g = &s.v_hi * s.v_hi.transpose() / s.hi - &s.v_lo * s.v_lo.transpose() / s.lo;
    let grad = b * g * T::lit(2.0);
    Ok((s.hi.ln() - s.lo.ln(), grad))
}

/// Balance loss of the stack sampled at the sparse pixels.
pub fn balance_loss<T: Real>(stack: &BasisStack<T>, sparse: &SparseDepthSet<T>) -> Result<T> {
    let b = sampled(stack, sparse)?;
    balance_loss_of_matrix(&b)
}

/// Balance loss plus its gradient with respect to the sampled `k x N` matrix.
pub fn balance_loss_with_gradient<T: Real>(
    stack: &BasisStack<T>,
    sparse: &SparseDepthSet<T>,
) -> Result<(T, DMatrix<T>)> {
    let b = sampled(stack, sparse)?;
    balance_loss_gradient_of_matrix(&b)
}

fn sampled<T: Real>(stack: &BasisStack<T>, sparse: &SparseDepthSet<T>) -> Result<DMatrix<T>> {
    if sparse.len() < stack.count() {
        return Err(Error::SingularSystem(format!(
            "{} sparse points for {} bases",
            sparse.len(),
            stack.count()
        )));
    }
    Ok(design_matrix(stack, sparse)?.0)
}

/// `L_d + w_c L_c + w_b L_b`.
pub fn total_loss<T: Real>(
    pred: &DepthMap<T>,
    gt: &DepthMap<T>,
    conf: &ConfidenceMap<T>,
    stack: &BasisStack<T>,
    sparse: &SparseDepthSet<T>,
    lw: &LossWeights<T>,
) -> Result<T> {
    let ld = depth_loss(pred, gt)?;
    let lc = confidence_loss(pred, gt, conf, lw.w_0)?;
    let lb = if lw.w_b == T::zero() {
        T::zero()
    } else {
        balance_loss(stack, sparse)?
    };
    Ok(ld + lw.w_c * lc + lw.w_b * lb)
}
