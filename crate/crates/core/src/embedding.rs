//! Unit-norm feature vectors and the similarity kernel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Allowed deviation of a stored embedding's norm from 1.
pub const UNIT_TOLERANCE: f64 = 1e-5;

/// A fixed-dimension feature vector stored in `f32`.
///
/// Library items always hold normalized embeddings; raw vectors coming from
/// an encoder go through [`normalize`] first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    values: Vec<f32>,
    normalized: bool,
}

impl Embedding {
    /// Wraps a vector that is already unit-norm, checking the claim.
    pub fn from_unit(values: Vec<f32>) -> Result<Self> {
        check_shape(&values)?;
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(Error::NotNormalized(norm));
        }
        Ok(Self { values, normalized: true })
    }

    /// Wraps a raw vector without normalizing it.
    pub fn raw(values: Vec<f32>) -> Result<Self> {
        check_shape(&values)?;
        Ok(Self { values, normalized: false })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    /// Cosine similarity for unit vectors (plain dot product, f64 accumulation).
    pub fn similarity(&self, other: &Embedding) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimMismatch { expected: self.dim(), found: other.dim() });
        }
        Ok(dot(&self.values, &other.values))
    }

    /// Returns a unit-norm copy (no-op when already normalized).
    pub fn normalized(&self) -> Result<Embedding> {
        if self.normalized {
            Ok(self.clone())
        } else {
            normalize(&self.values)
        }
    }
}

fn check_shape(values: &[f32]) -> Result<()> {
    if values.len() < 2 {
        return Err(Error::DimTooSmall(values.len()));
    }
    if values.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(())
}

/// Scales `v` to unit L2 norm.
pub fn normalize(v: &[f32]) -> Result<Embedding> {
    check_shape(v)?;
    let norm = l2_norm(v);
    if norm < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    let values = v.iter().map(|&x| (x as f64 / norm) as f32).collect();
    Ok(Embedding { values, normalized: true })
}

pub fn l2_norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

const LANES: usize = 16;

/// Dot product of two equal-length `f32` slices, accumulated in `f64`.
///
/// Products of two `f32` values are exact in `f64`, so the only rounding
/// comes from the fixed 16-lane summation order, which is the same on every
/// call and every thread.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for i in 0..LANES {
            acc[i] += xa[i] as f64 * xb[i] as f64;
        }
    }
    let mut tail = 0.0f64;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x as f64 * *y as f64;
    }
    // pairwise reduction of the lanes
    let mut width = LANES;
    while width > 1 {
        width /= 2;
        for i in 0..width {
            acc[i] += acc[i + width];
        }
    }
    acc[0] + tail
}

const FAST_LANES: usize = 32;

/// Single-precision dot product, used only to discard rows cheaply.
/// Its distance from [`dot`] is bounded by [`fast_dot_margin`].
#[inline]
pub(crate) fn fast_dot(a: &[f32], b: &[f32]) -> f32 {
    let body = a.len() - a.len() % FAST_LANES;
    let mut acc = [0.0f32; FAST_LANES];
    for (xa, xb) in a[..body].chunks_exact(FAST_LANES).zip(b[..body].chunks_exact(FAST_LANES)) {
        for i in 0..FAST_LANES {
            acc[i] += xa[i] * xb[i];
        }
    }
    for i in body..a.len() {
        acc[i - body] += a[i] * b[i];
    }
    // a sequential lane sum is markedly faster here than a pairwise tree
    acc.iter().sum()
}

/// Upper bound on `|fast_dot(a, b) - dot(a, b)|` for near-unit inputs of
/// length `dim`.
///
/// Each term passes through one product rounding, at most
/// `ceil(dim / 32)` lane additions and 31 additions across lanes, so the
/// single-precision error is at most `h * u * sum |a_i b_i|` with
/// `u = 2^-24`. The sum is at most `|a| |b|`, close to 1 for unit vectors.
/// The bound is doubled and padded to cover the double-precision result.
pub(crate) fn fast_dot_margin(dim: usize) -> f64 {
    let h = 1 + dim.div_ceil(FAST_LANES) + FAST_LANES - 1;
    let u = f64::powi(2.0, -24);
    2.0 * (h as f64 + 1.0) * u * 1.001 + 1e-12
}
