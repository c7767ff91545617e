//! Multi-basis depth representation.
//!
//! A keyframe's dense depth is a linear combination `D = sum_i w_i B_i` of
//! `N` basis maps. Given sparse metric depths, the weights follow from the
//! normal equations `(B^T B) w = B^T S`, where row `j` of `B` holds every
//! basis sampled at sparse pixel `j`. The eigen-spectrum of `B^T B` measures
//! how well the bases condition that solve.

use nalgebra::{DMatrix, DVector, Matrix2xX, Vector2};

use crate::error::{Error, Result};
use crate::maps::{DepthMap, Map, DEFAULT_MAX_DEPTH};
use crate::scalar::Real;

/// Default number of depth bases per keyframe.
pub const DEFAULT_BASIS_COUNT: usize = 4;

/// `N` depth-basis maps of identical size, stored pixel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisStack<T> {
    width: usize,
    height: usize,
    n: usize,
    data: Vec<T>,
}

impl<T: Real> BasisStack<T> {
    pub fn new(bases: &[Map<T>]) -> Result<Self> {
        let first = bases
            .first()
            .ok_or_else(|| Error::DimensionMismatch("a basis stack needs at least one map".into()))?;
        let (width, height) = (first.width(), first.height());
        if width < 2 || height < 2 {
            return Err(Error::DimensionMismatch(
                "basis maps must be at least 2x2".into(),
            ));
        }
        if bases.iter().any(|b| b.width() != width || b.height() != height) {
            return Err(Error::DimensionMismatch("basis maps differ in size".into()));
        }
        let n = bases.len();
        let mut data = Vec::with_capacity(width * height * n);
        for idx in 0..width * height {
            for b in bases {
                let v = b.as_slice()[idx];
                if !v.is_finite() {
                    return Err(Error::InvalidConfig("basis values must be finite".into()));
                }
                data.push(v);
            }
        }
        Ok(Self {
            width,
            height,
            n,
            data,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    /// Basis count `N`.
    #[inline]
    pub fn count(&self) -> usize {
        self.n
    }

    /// The `N` basis values at an integer pixel.
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[T] {
        let o = (y * self.width + x) * self.n;
        &self.data[o..o + self.n]
    }

    /// Extracts basis `i` as a standalone map.
    pub fn basis(&self, i: usize) -> Map<T> {
        Map::from_fn(self.width, self.height, |x, y| self.at(x, y)[i])
    }

    pub fn bases(&self) -> Vec<Map<T>> {
        (0..self.n).map(|i| self.basis(i)).collect()
    }

    /// Multiplies every basis by `c`.
    pub fn scaled(&self, c: T) -> Self {
        Self {
            data: self.data.iter().map(|&v| v * c).collect(),
            ..self.clone()
        }
    }

    /// Whether `pixel` has full bilinear support, `[0, W-1] x [0, H-1]`.
    #[inline]
    pub fn in_support(&self, pixel: &Vector2<T>) -> bool {
        pixel.x >= T::zero()
            && pixel.y >= T::zero()
            && pixel.x <= T::from_count(self.width - 1)
            && pixel.y <= T::from_count(self.height - 1)
    }

    /// Integer cell origin and fractional offsets of a supported pixel.
    #[inline]
    pub(crate) fn cell(&self, pixel: &Vector2<T>) -> (usize, usize, T, T) {
        let fx = pixel.x.floor();
        let fy = pixel.y.floor();
        let x0 = (fx.as_f64() as usize).min(self.width - 2);
        let y0 = (fy.as_f64() as usize).min(self.height - 2);
        (
            x0,
            y0,
            pixel.x - T::from_count(x0),
            pixel.y - T::from_count(y0),
        )
    }
}

/// Per-pixel weight vector of a keyframe's bases.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector<T: Real>(pub DVector<T>);

impl<T: Real> WeightVector<T> {
    pub fn new(values: DVector<T>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("weights must be finite".into()));
        }
        Ok(Self(values))
    }

    pub fn from_slice(values: &[T]) -> Self {
        Self(DVector::from_column_slice(values))
    }

    pub fn ones(n: usize) -> Self {
        Self(DVector::from_element(n, T::one()))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DVector::zeros(n))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<T> {
        &self.0
    }
}

/// One sparse metric depth observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsePoint<T: Real> {
    pub pixel: Vector2<T>,
    pub depth: T,
    pub landmark_id: Option<usize>,
}

/// Sparse depths of a keyframe.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseDepthSet<T: Real> {
    pub points: Vec<SparsePoint<T>>,
}

impl<T: Real> SparseDepthSet<T> {
    /// Validates pixel bounds (`[0, W-1] x [0, H-1]`) and depth positivity.
    pub fn new(points: Vec<SparsePoint<T>>, width: usize, height: usize) -> Result<Self> {
        let max_u = T::from_count(width.saturating_sub(1));
        let max_v = T::from_count(height.saturating_sub(1));
        for p in &points {
            if !(p.pixel.x >= T::zero() && p.pixel.x <= max_u && p.pixel.y >= T::zero() && p.pixel.y <= max_v) {
                return Err(Error::OutOfSupport(p.pixel.x.as_f64(), p.pixel.y.as_f64()));
            }
            if !(p.depth > T::zero()) || !p.depth.is_finite() {
                return Err(Error::InvalidDepth(p.depth.as_f64()));
            }
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Bilinear sample of every basis plus the analytic spatial gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct StackSample<T: Real> {
    /// `N` interpolated basis values.
    pub values: DVector<T>,
    /// Row 0 is `d/du`, row 1 is `d/dv`, one column per basis.
    pub gradient: Matrix2xX<T>,
}

/// Pixel-wise weighted sum of the bases. Entries `<= 0` or beyond the
/// default max depth are masked invalid.
pub fn compose_depth<T: Real>(stack: &BasisStack<T>, w: &WeightVector<T>) -> Result<DepthMap<T>> {
    compose_depth_with_max(stack, w, T::lit(DEFAULT_MAX_DEPTH))
}

pub fn compose_depth_with_max<T: Real>(
    stack: &BasisStack<T>,
    w: &WeightVector<T>,
    max_depth: T,
) -> Result<DepthMap<T>> {
    if w.len() != stack.count() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} bases",
            w.len(),
            stack.count()
        )));
    }
    let n = stack.count();
    let values: Vec<T> = stack
        .data
        .chunks_exact(n)
        .map(|b| b.iter().zip(w.0.iter()).fold(T::zero(), |acc, (&bi, &wi)| acc + bi * wi))
        .collect();
    Ok(DepthMap::with_max_depth(
        Map::new(stack.width, stack.height, values)?,
        max_depth,
    ))
}

/// Bilinear interpolation of each basis at `pixel`, with gradient.
pub fn sample_stack_bilinear<T: Real>(stack: &BasisStack<T>, pixel: &Vector2<T>) -> Result<StackSample<T>> {
    if !stack.in_support(pixel) {
        return Err(Error::OutOfSupport(pixel.x.as_f64(), pixel.y.as_f64()));
    }
    let (x0, y0, ax, ay) = stack.cell(pixel);
    let n = stack.count();
    let b00 = stack.at(x0, y0);
    let b10 = stack.at(x0 + 1, y0);
    let b01 = stack.at(x0, y0 + 1);
    let b11 = stack.at(x0 + 1, y0 + 1);
    let one = T::one();
    let mut values = DVector::zeros(n);
    let mut gradient = Matrix2xX::zeros(n);
    // Product-form weights keep interpolation nodes exact.
    let (w00, w10) = ((one - ax) * (one - ay), ax * (one - ay));
    let (w01, w11) = ((one - ax) * ay, ax * ay);
    for i in 0..n {
        values[i] = b00[i] * w00 + b10[i] * w10 + b01[i] * w01 + b11[i] * w11;
        let top = b00[i] + (b10[i] - b00[i]) * ax;
        let bottom = b01[i] + (b11[i] - b01[i]) * ax;
        gradient[(0, i)] = (one - ay) * (b10[i] - b00[i]) + ay * (b11[i] - b01[i]);
        gradient[(1, i)] = bottom - top;
    }
    Ok(StackSample { values, gradient })
}

/// Interpolated basis values only.
pub fn sample_stack_values<T: Real>(stack: &BasisStack<T>, pixel: &Vector2<T>) -> Result<DVector<T>> {
    sample_stack_bilinear(stack, pixel).map(|s| s.values)
}

/// The sampled design matrix `B` (`k x N`) and sparse depth vector `S`.
pub fn design_matrix<T: Real>(
    stack: &BasisStack<T>,
    sparse: &SparseDepthSet<T>,
) -> Result<(DMatrix<T>, DVector<T>)> {
    let k = sparse.len();
    let n = stack.count();
    let mut b = DMatrix::zeros(k, n);
    let mut s = DVector::zeros(k);
    for (j, p) in sparse.points.iter().enumerate() {
        let row = sample_stack_values(stack, &p.pixel)?;
        b.row_mut(j).copy_from(&row.transpose());
        s[j] = p.depth;
    }
    Ok((b, s))
}

fn gram_extremes<T: Real>(gram: &DMatrix<T>) -> (T, T) {
    let eig = gram.clone().symmetric_eigen();
    let mut lo = eig.eigenvalues[0];
    let mut hi = eig.eigenvalues[0];
    for &l in eig.eigenvalues.iter() {
        if l < lo {
            lo = l;
        }
        if l > hi {
            hi = l;
        }
    }
    (lo, hi)
}

fn solve_normal_equations<T: Real>(gram: DMatrix<T>, rhs: &DVector<T>) -> Result<DVector<T>> {
    gram.cholesky()
        .map(|c| c.solve(rhs))
        .ok_or_else(|| Error::SingularSystem("normal equations are not positive definite".into()))
}

/// Least-squares weights from the normal equations `(B^T B + damping I) w = B^T S`.
///
/// With `damping == 0` a rank-deficient (or underdetermined) system is an error.
pub fn solve_weights<T: Real>(
    stack: &BasisStack<T>,
    sparse: &SparseDepthSet<T>,
    damping: T,
) -> Result<WeightVector<T>> {
    if sparse.is_empty() {
        return Err(Error::SingularSystem("no sparse points".into()));
    }
    if damping < T::zero() {
        return Err(Error::InvalidConfig("damping must be non-negative".into()));
    }
    let (b, s) = design_matrix(stack, sparse)?;
    let n = stack.count();
    let mut gram = b.transpose() * &b;
    let rhs = b.transpose() * s;
    if damping == T::zero() {
        if sparse.len() < n {
            return Err(Error::SingularSystem(format!(
                "{} sparse points for {} bases",
                sparse.len(),
                n
            )));
        }
        let (lo, hi) = gram_extremes(&gram);
        if !(hi > T::zero()) || lo <= hi * T::lit(1e-12) {
            return Err(Error::SingularSystem("rank-deficient sampled bases".into()));
        }
    } else {
        for i in 0..n {
            gram[(i, i)] += damping;
        }
    }
    Ok(WeightVector(solve_normal_equations(gram, &rhs)?))
}

/// [`solve_weights`] with automatic Tikhonov damping `1e-8 * trace / N`
/// whenever `lambda_min < 1e-12 * lambda_max`. Returns the weights and
/// whether damping was applied.
pub fn solve_weights_with_fallback<T: Real>(
    stack: &BasisStack<T>,
    sparse: &SparseDepthSet<T>,
) -> Result<(WeightVector<T>, bool)> {
    if sparse.is_empty() {
        return Err(Error::SingularSystem("no sparse points".into()));
    }
    let (b, s) = design_matrix(stack, sparse)?;
    let n = stack.count();
    let mut gram = b.transpose() * &b;
    let rhs = b.transpose() * s;
    let (lo, hi) = gram_extremes(&gram);
    let damped = sparse.len() < n || lo < hi * T::lit(1e-12);
    if damped {
        let mut damping = T::lit(1e-8) * gram.trace() / T::from_count(n);
        if !(damping > T::zero()) {
            damping = T::lit(1e-12);
        }
        for i in 0..n {
            gram[(i, i)] += damping;
        }
    }
    Ok((WeightVector(solve_normal_equations(gram, &rhs)?), damped))
}

/// Result of [`condition_number`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Condition<T> {
    Finite(T),
    /// `lambda_min` is zero to working precision.
    Infinite,
}

impl<T: Real> Condition<T> {
    pub fn value(&self) -> T {
        match self {
            Condition::Finite(c) => *c,
            Condition::Infinite => T::max_value().unwrap_or(T::lit(f64::MAX)),
        }
    }

    pub fn is_infinite(&self) -> bool {
        matches!(self, Condition::Infinite)
    }
}

/// `lambda_max / lambda_min` of the sampled Gram matrix `B^T B`.
pub fn condition_number<T: Real>(stack: &BasisStack<T>, sparse: &SparseDepthSet<T>) -> Result<Condition<T>> {
    if sparse.len() < stack.count() {
        return Err(Error::SingularSystem(format!(
            "{} sparse points for {} bases",
            sparse.len(),
            stack.count()
        )));
    }
    let (b, _) = design_matrix(stack, sparse)?;
    Ok(gram_condition(&(b.transpose() * &b)))
}

/// Condition number of a symmetric PSD matrix.
pub fn gram_condition<T: Real>(gram: &DMatrix<T>) -> Condition<T> {
    let (lo, hi) = gram_extremes(gram);
    let tol = hi * T::default_epsilon() * T::from_count(100 * gram.nrows().max(1));
    if !(hi > T::zero()) || lo <= tol {
        Condition::Infinite
    } else {
        Condition::Finite(hi / lo)
    }
}
