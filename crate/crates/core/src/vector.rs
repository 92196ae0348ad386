//! Embedding vectors, labels and the cosine distance.
//!
//! Every vector is L2-normalized exactly once when it enters the system, so a
//! cosine distance is just `1 - <a, b>`. Components are stored as `f32`;
//! reductions accumulate in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as the zero vector.
pub const MIN_NORM: f64 = 1e-12;

/// A unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    /// Normalizes `raw` to unit length.
    pub fn normalize(raw: &[f32]) -> Result<Self> {
        normalize(raw)
    }

    /// Wraps values that are already unit-norm (e.g. rows read back from a
    /// saved memory). Only finiteness is checked.
    pub fn from_normalized(values: Vec<f32>) -> Result<Self> {
        check_finite(&values)?;
        if values.is_empty() {
            return Err(Error::ZeroVector);
        }
        Ok(EmbeddingVector(values))
    }

    pub fn dims(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }
}

impl AsRef<[f32]> for EmbeddingVector {
    fn as_ref(&self) -> &[f32] {
        &self.0
    }
}

/// Index into a memory's label table.
pub type LabelId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Label {
    pub id: LabelId,
    pub name: String,
}

/// Cosine distance between unit vectors, in `[0, 2]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Distance(f64);

impl Distance {
    pub const ZERO: Distance = Distance(0.0);

    /// Builds a distance from a dot product of unit vectors. Rounding can push
    /// `1 - dot` slightly outside `[0, 2]`; the result is clamped.
    #[inline]
    pub fn from_dot(dot: f64) -> Self {
        Distance::new(1.0 - dot)
    }

    /// Clamps `value` into `[0, 2]`.
    #[inline]
    pub fn new(value: f64) -> Self {
        Distance(value.clamp(0.0, 2.0))
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}

fn check_finite(values: &[f32]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// Scales `raw` to unit L2 norm.
pub fn normalize(raw: &[f32]) -> Result<EmbeddingVector> {
    check_finite(raw)?;
    let norm = dot(raw, raw).sqrt();
    if raw.is_empty() || norm < MIN_NORM {
        return Err(Error::ZeroVector);
    }
    Ok(EmbeddingVector(
        raw.iter().map(|&v| (f64::from(v) / norm) as f32).collect(),
    ))
}

/// Dot product with `f64` accumulation.
///
/// Four independent accumulators keep the reduction pipelined; the summation
/// order is fixed, so the result is a pure function of the two slices.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += f64::from(x[0]) * f64::from(y[0]);
        acc[1] += f64::from(x[1]) * f64::from(y[1]);
        acc[2] += f64::from(x[2]) * f64::from(y[2]);
        acc[3] += f64::from(x[3]) * f64::from(y[3]);
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += f64::from(*x) * f64::from(*y);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `1 - <a, b>` for unit vectors.
pub fn cosine_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<Distance> {
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch {
            expected: a.dims(),
            found: b.dims(),
        });
    }
    Ok(Distance::from_dot(dot(a.as_slice(), b.as_slice())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        let v = normalize(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(v.as_slice(), &[1.0, 0.0, 0.0]);

        let v = normalize(&[3.0, 4.0]).unwrap();
        assert_abs_diff_eq!(v.as_slice()[0], 0.6, epsilon = 1e-7);
        assert_abs_diff_eq!(v.as_slice()[1], 0.8, epsilon = 1e-7);

        assert!(matches!(normalize(&[0.0, 0.0]), Err(Error::ZeroVector)));
        assert!(matches!(normalize(&[]), Err(Error::ZeroVector)));
        assert!(matches!(
            normalize(&[1.0, f32::NAN]),
            Err(Error::NonFinite { index: 1 })
        ));
        assert!(matches!(
            normalize(&[f32::INFINITY]),
            Err(Error::NonFinite { index: 0 })
        ));
    }

    #[test]
    fn distance_examples() {
        let a = normalize(&[1.0, 0.0]).unwrap();
        let b = normalize(&[0.0, 2.0]).unwrap();
        let c = normalize(&[-5.0, 0.0]).unwrap();
        assert_eq!(cosine_distance(&a, &a).unwrap().value(), 0.0);
        assert_eq!(cosine_distance(&a, &b).unwrap().value(), 1.0);
        assert_eq!(cosine_distance(&a, &c).unwrap().value(), 2.0);

        let d = normalize(&[1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            cosine_distance(&a, &d),
            Err(Error::DimMismatch {
                expected: 2,
                found: 3
            })
        ));
    }

    #[test]
    fn dot_matches_sequential_sum() {
        let a: Vec<f32> = (0..13).map(|i| i as f32 * 0.25 - 1.0).collect();
        let b: Vec<f32> = (0..13).map(|i| (i as f32).sin()).collect();
        let naive: f64 = a
            .iter()
            .zip(&b)
            .map(|(x, y)| f64::from(*x) * f64::from(*y))
            .sum();
        assert_abs_diff_eq!(dot(&a, &b), naive, epsilon = 1e-12);
    }

    fn raw_vec(dims: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-10.0f32..10.0, dims)
            .prop_filter("non-zero", |v| v.iter().any(|x| x.abs() > 1e-3))
    }

    proptest! {
        #[test]
        fn normalized_vectors_have_unit_norm(v in raw_vec(17)) {
            let e = normalize(&v).unwrap();
            prop_assert!((e.norm() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn distance_is_symmetric_and_bounded(a in raw_vec(8), b in raw_vec(8)) {
            let a = normalize(&a).unwrap();
            let b = normalize(&b).unwrap();
            let ab = cosine_distance(&a, &b).unwrap().value();
            let ba = cosine_distance(&b, &a).unwrap().value();
            prop_assert_eq!(ab, ba);
            prop_assert!((0.0..=2.0).contains(&ab));
        }

        #[test]
        fn ingest_is_scale_invariant(v in raw_vec(8), w in raw_vec(8), c in 0.01f32..100.0) {
            let w = normalize(&w).unwrap();
            let base = cosine_distance(&normalize(&v).unwrap(), &w).unwrap().value();
            let scaled: Vec<f32> = v.iter().map(|x| x * c).collect();
            let other = cosine_distance(&normalize(&scaled).unwrap(), &w).unwrap().value();
            prop_assert!((base - other).abs() < 1e-6);
        }
    }
}
