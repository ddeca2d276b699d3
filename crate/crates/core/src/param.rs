//! Dense parameter vectors.

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

/// A dense real vector holding model parameters or gradients.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    /// Euclidean distance to `other`.
    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &[f64]) {
        for (s, v) in self.0.iter_mut().zip(x) {
            *s += alpha * v;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for s in &mut self.0 {
            *s *= alpha;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn check_len(&self, expected: usize) -> Result<()> {
        if self.0.len() == expected {
            Ok(())
        } else {
            Err(Error::Dimension {
                expected,
                got: self.0.len(),
            })
        }
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Weighted average `sum_i weights[i] * vectors[i] / sum_i weights[i]`.
///
/// Computed relative to the first vector so that averaging identical vectors
/// returns that vector bit-for-bit. Reduction order is fixed by slice order.
pub fn weighted_mean(vectors: &[&[f64]], weights: &[f64]) -> Result<ParamVector> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::config("weighted mean of zero vectors"))?;
    if vectors.len() != weights.len() {
        return Err(Error::Dimension {
            expected: vectors.len(),
            got: weights.len(),
        });
    }
    let dim = first.len();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::config("weights must be non-negative with a positive sum"));
    }
    let mut out = first.to_vec();
    let mut delta = vec![0.0; dim];
    for (v, w) in vectors.iter().zip(weights).skip(1) {
        if v.len() != dim {
            return Err(Error::Dimension {
                expected: dim,
                got: v.len(),
            });
        }
        let frac = w / total;
        for ((d, a), b) in delta.iter_mut().zip(v.iter()).zip(first.iter()) {
            *d += frac * (a - b);
        }
    }
    for (o, d) in out.iter_mut().zip(&delta) {
        *o += d;
    }
    Ok(ParamVector(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_vectors_average_exactly() {
        let v = [0.1, 0.7, -1.3e-7];
        let m = weighted_mean(&[&v, &v, &v], &[3.0, 5.0, 7.0]).unwrap();
        assert_eq!(m.as_slice(), &v);
    }

    #[test]
    fn weighted_average() {
        let m = weighted_mean(&[&[0.0], &[4.0]], &[1.0, 3.0]).unwrap();
        assert!((m[0] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_mismatched_lengths() {
        assert!(weighted_mean(&[&[0.0], &[4.0, 1.0]], &[1.0, 1.0]).is_err());
        assert!(weighted_mean(&[&[0.0]], &[1.0, 1.0]).is_err());
        assert!(weighted_mean(&[], &[]).is_err());
    }
}
