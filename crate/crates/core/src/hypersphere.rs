//! Unit vectors, clamped cosine matrices and additive angular margins.

use crate::error::{Error, Result};
use crate::numeric::Scalar;

/// Norms at or below this are rejected by [`normalize`].
pub const MIN_NORM: f64 = 1e-12;

/// Cosines are clamped to `[-1 + COS_EPS, 1 - COS_EPS]` so `arccos` and
/// `sin θ = sqrt(1 - cos²θ)` stay finite with finite derivatives.
pub const COS_EPS: f64 = 1e-7;

/// A vector with Euclidean norm 1 (within 1e-9).
#[derive(Clone, Debug, PartialEq)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for UnitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// One sample's cosine similarity to every class center.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineRow(pub Vec<f64>);

impl CosineRow {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Index<usize> for CosineRow {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

pub fn norm<T: Scalar>(v: &[T]) -> T {
    dot(v, v).sqrt()
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Scales `v` onto the unit sphere.
pub fn normalize(v: &[f64]) -> Result<UnitVector> {
    let n = norm(v);
    if !(n > MIN_NORM) {
        return Err(Error::ZeroVector { norm: n });
    }
    Ok(UnitVector(v.iter().map(|x| x / n).collect()))
}

/// Unchecked normalization returning the unit vector and the original norm.
pub(crate) fn normalize_with_norm<T: Scalar>(v: &[T]) -> (Vec<T>, T) {
    let n = norm(v);
    (v.iter().map(|&x| x / n).collect(), n)
}

#[inline]
pub(crate) fn clamp_cos<T: Scalar>(c: T) -> T {
    c.max(T::from_f64(-1.0 + COS_EPS))
        .min(T::from_f64(1.0 - COS_EPS))
}

/// `true` when a raw dot product lies strictly inside the clamp window, i.e.
/// the clamp passes gradients through.
#[inline]
pub(crate) fn cos_unclamped(raw: f64) -> bool {
    raw > -1.0 + COS_EPS && raw < 1.0 - COS_EPS
}

/// Entry `(i, j)` is `<features[i], centers[j]>`, clamped to
/// `[-1 + COS_EPS, 1 - COS_EPS]`.
pub fn cosine_matrix(features: &[UnitVector], centers: &[UnitVector]) -> Result<Vec<CosineRow>> {
    let dim = match centers.first().or(features.first()) {
        Some(v) => v.dim(),
        None => return Ok(Vec::new()),
    };
    for v in features.iter().chain(centers) {
        if v.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: v.dim(),
            });
        }
    }
    Ok(features
        .iter()
        .map(|x| {
            CosineRow(
                centers
                    .iter()
                    .map(|w| clamp_cos(dot(x.coords(), w.coords())))
                    .collect(),
            )
        })
        .collect())
}

pub(crate) fn cosine_rows<T: Scalar>(features: &[Vec<T>], centers: &[Vec<T>]) -> Vec<Vec<T>> {
    features
        .iter()
        .map(|x| centers.iter().map(|w| clamp_cos(dot(x, w))).collect())
        .collect()
}

/// `cos(arccos(c) + m)` with `c` clamped to `[-1, 1]`.
///
/// Evaluated through the addition formula `c cos m - sqrt(1 - c²) sin m`,
/// which is exact for `m = 0` and has no easy-margin fallback: for
/// `θ + m > π` the result is still `cos(θ + m)`.
pub fn angular_add(cos_theta: f64, m: f64) -> f64 {
    angular_add_with(cos_theta, m.cos(), m.sin())
}

#[inline]
pub(crate) fn angular_add_with<T: Scalar>(cos_theta: T, cos_m: f64, sin_m: f64) -> T {
    let one = T::one();
    let c = cos_theta.max(-one).min(one);
    let sin_theta = (one - c * c).max(T::zero()).sqrt();
    (c * T::from_f64(cos_m) - sin_theta * T::from_f64(sin_m))
        .max(-one)
        .min(one)
}

/// [`angular_add`] with the angle capped at `π`: `cos(min(θ + m, π))`.
///
/// Past `θ + m = π` the raw expression turns back up, which rewards pushing
/// a sample away from its own center. The capped form is monotone in `c`,
/// continuously differentiable (the slope is 0 at the cap) and identical to
/// the raw expression whenever `θ + m ≤ π`.
pub fn angular_add_saturating(cos_theta: f64, m: f64) -> f64 {
    angular_add_saturating_with(cos_theta, m.cos(), m.sin())
}

#[inline]
pub(crate) fn angular_add_saturating_with<T: Scalar>(cos_theta: T, cos_m: f64, sin_m: f64) -> T {
    if cos_theta <= T::from_f64(-cos_m) {
        return -T::one();
    }
    angular_add_with(cos_theta, cos_m, sin_m)
}

/// Slope of [`angular_add_saturating`].
#[inline]
pub(crate) fn angular_add_saturating_derivative(cos_theta: f64, cos_m: f64, sin_m: f64) -> f64 {
    if cos_theta <= -cos_m {
        return 0.0;
    }
    angular_add_derivative(cos_theta, cos_m, sin_m)
}

/// `d/dc cos(arccos(c) + m) = sin(θ + m) / sin θ = cos m + c sin m / sin θ`.
///
/// Only meaningful for `|c| < 1`; callers pass clamped cosines.
#[inline]
pub(crate) fn angular_add_derivative(cos_theta: f64, cos_m: f64, sin_m: f64) -> f64 {
    if sin_m == 0.0 {
        return cos_m;
    }
    let sin_theta = (1.0 - cos_theta * cos_theta).sqrt();
    cos_m + cos_theta * sin_m / sin_theta
}
