//! Dense per-pixel maps: raw grids, depth maps with validity, confidence.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Default upper bound of the valid depth range, meters.
pub const DEFAULT_MAX_DEPTH: f64 = 100.0;

/// Row-major `width x height` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Map<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Copy> Map<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {}x{} map",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Map<U> {
        Map {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn same_shape<U>(&self, other: &Map<U>) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Dense depth in meters with a validity mask.
///
/// A pixel is valid when its value is finite and lies in `(0, max_depth]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap<T> {
    values: Map<T>,
    valid: Vec<bool>,
}

impl<T: Real> DepthMap<T> {
    /// Wraps `values`, masking entries outside `(0, DEFAULT_MAX_DEPTH]`.
    pub fn new(values: Map<T>) -> Self {
        Self::with_max_depth(values, T::lit(DEFAULT_MAX_DEPTH))
    }

    pub fn with_max_depth(values: Map<T>, max_depth: T) -> Self {
        let valid = values
            .as_slice()
            .iter()
            .map(|&v| v.is_finite() && v > T::zero() && v <= max_depth)
            .collect();
        Self { values, valid }
    }

    /// Uses an explicit mask; masked-in entries must still be positive and finite.
    pub fn with_mask(values: Map<T>, mask: &[bool]) -> Result<Self> {
        if mask.len() != values.len() {
            return Err(Error::DimensionMismatch("mask size".into()));
        }
        let valid = values
            .as_slice()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| m && v.is_finite() && v > T::zero())
            .collect();
        Ok(Self { values, valid })
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    pub fn values(&self) -> &Map<T> {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.values.get(x, y)
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.valid[y * self.values.width() + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Mask of pixels valid in both maps.
    pub fn joint_mask(&self, other: &Self) -> Result<Vec<bool>> {
        if !self.values.same_shape(&other.values) {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.width(),
                self.height(),
                other.width(),
                other.height()
            )));
        }
        Ok(self
            .valid
            .iter()
            .zip(&other.valid)
            .map(|(&a, &b)| a && b)
            .collect())
    }
}

/// Non-negative per-pixel confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceMap<T> {
    values: Map<T>,
}

impl<T: Real> ConfidenceMap<T> {
    pub fn new(values: Map<T>) -> Result<Self> {
        if values
            .as_slice()
            .iter()
            .any(|&c| !c.is_finite() || c < T::zero())
        {
            return Err(Error::InvalidConfig(
                "confidence must be finite and non-negative".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn uniform(width: usize, height: usize, value: T) -> Self {
        Self {
            values: Map::filled(width, height, value),
        }
    }

    pub fn values(&self) -> &Map<T> {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.values.get(x, y)
    }

    /// Confidence at the nearest pixel centre, clamped into the image.
    pub fn nearest(&self, u: T, v: T) -> T {
        let x = u.round().as_f64().clamp(0.0, (self.values.width() - 1) as f64) as usize;
        let y = v.round().as_f64().clamp(0.0, (self.values.height() - 1) as f64) as usize;
        self.values.get(x, y)
    }

    pub fn max(&self) -> T {
        self.values
            .as_slice()
            .iter()
            .copied()
            .fold(T::zero(), |a, b| if b > a { b } else { a })
    }
}
