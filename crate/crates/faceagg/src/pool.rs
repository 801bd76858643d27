//! Reference aggregators: average pool, max pool, and frame-level attention
//! (one scalar weight per frame). These serve as baselines and as the targets
//! of the dimension-wise aggregator's degeneration tests.

use crate::types::{FeatureSet, FeatureVector};
use crate::{Error, Result};

/// Kernel of the frame-level attention baseline: a single length-M filter
/// whose dot product with each frame yields that frame's significance score.
#[derive(Debug, Clone, PartialEq)]
pub struct NanParams {
    pub q: FeatureVector,
}

impl NanParams {
    pub fn zeros(dim: usize) -> Self {
        Self {
            q: FeatureVector::zeros(dim),
        }
    }
}

/// Softmax with max subtraction, in place.
pub(crate) fn stable_softmax(scores: &mut [f64]) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

pub fn l2_normalize(v: &FeatureVector) -> Result<FeatureVector> {
    let norm = v.norm();
    if norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    FeatureVector::new(v.values().iter().map(|x| x / norm).collect())
}

/// Componentwise mean over frames.
pub fn avg_pool(s: &FeatureSet) -> FeatureVector {
    let dim = s.dim();
    let mut out = vec![0.0; dim];
    for f in s.frames() {
        for (o, &x) in out.iter_mut().zip(f.values()) {
            *o += x;
        }
    }
    let k = s.len() as f64;
    for o in &mut out {
        *o /= k;
    }
    FeatureVector::new(out).expect("mean of finite frames is finite")
}

/// Componentwise maximum over frames.
pub fn max_pool(s: &FeatureSet) -> FeatureVector {
    let mut out = s.frames()[0].values().to_vec();
    for f in &s.frames()[1..] {
        for (o, &x) in out.iter_mut().zip(f.values()) {
            if x > *o {
                *o = x;
            }
        }
    }
    FeatureVector::new(out).expect("max of finite frames is finite")
}

/// Per-frame softmax weights of the frame-level attention baseline:
/// a_k = softmax_k(q . F_k).
pub fn nan_weights(s: &FeatureSet, p: &NanParams) -> Result<Vec<f64>> {
    if p.q.dim() != s.dim() {
        return Err(Error::DimensionMismatch {
            expected: s.dim(),
            got: p.q.dim(),
        });
    }
    let mut scores: Vec<f64> = s
        .frames()
        .iter()
        .map(|f| p.q.dot(f).expect("dims checked"))
        .collect();
    stable_softmax(&mut scores);
    Ok(scores)
}

/// Frame-level attention aggregation: r = sum_k a_k F_k with one scalar
/// weight per frame.
pub fn nan_aggregate(s: &FeatureSet, p: &NanParams) -> Result<FeatureVector> {
    let weights = nan_weights(s, p)?;
    let mut out = vec![0.0; s.dim()];
    for (f, &w) in s.frames().iter().zip(&weights) {
        for (o, &x) in out.iter_mut().zip(f.values()) {
            *o += w * x;
        }
    }
    FeatureVector::new(out)
}
