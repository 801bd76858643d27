//! Core value types: one frame's embedding and a labeled set of frames.

use crate::{Error, Result};

/// One frame's M-dimensional embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    values: Vec<f64>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: 0,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature vector"));
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &FeatureVector) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: other.dim(),
            });
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }
}

impl std::ops::Index<usize> for FeatureVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

/// Variable-length ordered collection of frames for one subject's set,
/// with an identity label and an opaque set id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    frames: Vec<FeatureVector>,
    pub label: u32,
    pub set_id: String,
}

impl FeatureSet {
    pub fn new(frames: Vec<FeatureVector>, label: u32, set_id: impl Into<String>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptySet);
        }
        let dim = frames[0].dim();
        for f in &frames[1..] {
            if f.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: f.dim(),
                });
            }
        }
        Ok(Self {
            frames,
            label,
            set_id: set_id.into(),
        })
    }

    pub fn frames(&self) -> &[FeatureVector] {
        &self.frames
    }

    /// Number of frames K.
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false // K >= 1 by construction
    }

    pub fn dim(&self) -> usize {
        self.frames[0].dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_entries() {
        assert!(FeatureVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(FeatureVector::new(vec![f64::INFINITY]).is_err());
        assert!(FeatureVector::new(vec![]).is_err());
    }

    #[test]
    fn set_requires_consistent_dims() {
        let a = FeatureVector::new(vec![1.0, 2.0]).unwrap();
        let b = FeatureVector::new(vec![1.0]).unwrap();
        assert!(matches!(
            FeatureSet::new(vec![a.clone(), b], 0, "s"),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(FeatureSet::new(vec![], 0, "s"), Err(Error::EmptySet)));
        assert!(FeatureSet::new(vec![a], 0, "s").is_ok());
    }
}
