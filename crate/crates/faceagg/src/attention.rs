//! Dimension-wise attention aggregation.
//!
//! Each frame k gets a per-dimension significance vector E_k. A softmax over
//! frames, taken independently for every dimension m, turns significance into
//! a weight matrix A with rows summing to one. The template is the
//! element-wise weighted sum r_m = sum_k a_mk F_k[m], L2-normalized.
//!
//! Two modes: a single linear block (E_k = Q F_k), which exists so the
//! degeneration claims are independently testable, and the production mode of
//! two cascaded affine blocks with tanh transfer.

use crate::pool::stable_softmax;
use crate::types::{FeatureSet, FeatureVector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    LinearSingleBlock,
    CascadedTanh,
}

/// Trainable parameters of the aggregation module. Matrices are row-major
/// M x M; biases are length M.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub mode: Mode,
    dim: usize,
    pub q1: Vec<f64>,
    pub b1: Vec<f64>,
    pub q2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl AttentionParams {
    pub fn zeros(dim: usize, mode: Mode) -> Self {
        Self {
            mode,
            dim,
            q1: vec![0.0; dim * dim],
            b1: vec![0.0; dim],
            q2: vec![0.0; dim * dim],
            b2: vec![0.0; dim],
        }
    }

    /// Single linear block with the given kernel; biases and block 2 stay zero.
    pub fn linear(dim: usize, q1: Vec<f64>) -> Result<Self> {
        if q1.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                got: q1.len(),
            });
        }
        if q1.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("attention kernel"));
        }
        let mut p = Self::zeros(dim, Mode::LinearSingleBlock);
        p.q1 = q1;
        Ok(p)
    }

    /// Linear mode with every row of Q equal to `q`. With this kernel the
    /// dimension-wise aggregator reproduces the frame-level baseline exactly.
    pub fn rank_one_linear(q: &FeatureVector) -> Self {
        let dim = q.dim();
        let mut q1 = Vec::with_capacity(dim * dim);
        for _ in 0..dim {
            q1.extend_from_slice(q.values());
        }
        Self::linear(dim, q1).expect("shape correct by construction")
    }

    pub fn cascaded(
        dim: usize,
        q1: Vec<f64>,
        b1: Vec<f64>,
        q2: Vec<f64>,
        b2: Vec<f64>,
    ) -> Result<Self> {
        for (buf, len, what) in [
            (&q1, dim * dim, "q1"),
            (&b1, dim, "b1"),
            (&q2, dim * dim, "q2"),
            (&b2, dim, "b2"),
        ] {
            if buf.len() != len {
                return Err(Error::DimensionMismatch {
                    expected: len,
                    got: buf.len(),
                });
            }
            if buf.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(match what {
                    "q1" => "attention q1",
                    "b1" => "attention b1",
                    "q2" => "attention q2",
                    _ => "attention b2",
                }));
            }
        }
        Ok(Self {
            mode: Mode::CascadedTanh,
            dim,
            q1,
            b1,
            q2,
            b2,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// M x K matrix, row-major; column k is frame k's significance vector.
#[derive(Debug, Clone, PartialEq)]
pub struct SignificanceMatrix {
    pub dim: usize,
    pub frames: usize,
    pub entries: Vec<f64>,
}

impl SignificanceMatrix {
    pub fn get(&self, m: usize, k: usize) -> f64 {
        self.entries[m * self.frames + k]
    }
}

/// M x K matrix of attention weights; row m is a distribution over frames.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    pub dim: usize,
    pub frames: usize,
    pub entries: Vec<f64>,
}

impl WeightMatrix {
    pub fn get(&self, m: usize, k: usize) -> f64 {
        self.entries[m * self.frames + k]
    }
}

fn mat_vec(mat: &[f64], dim: usize, v: &[f64], out: &mut [f64]) {
    for m in 0..dim {
        let row = &mat[m * dim..(m + 1) * dim];
        out[m] = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

/// Per-frame significance columns E_k.
///
/// Linear mode: E_k = Q1 F_k. Cascaded mode:
/// E_k = tanh(Q2 tanh(Q1 F_k + b1) + b2).
pub fn significance(s: &FeatureSet, p: &AttentionParams) -> Result<SignificanceMatrix> {
    let dim = s.dim();
    if p.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: p.dim(),
        });
    }
    let k_frames = s.len();
    let mut entries = vec![0.0; dim * k_frames];
    let mut col = vec![0.0; dim];
    let mut hidden = vec![0.0; dim];
    for (k, frame) in s.frames().iter().enumerate() {
        match p.mode {
            Mode::LinearSingleBlock => {
                mat_vec(&p.q1, dim, frame.values(), &mut col);
            }
            Mode::CascadedTanh => {
                mat_vec(&p.q1, dim, frame.values(), &mut hidden);
                for (h, b) in hidden.iter_mut().zip(&p.b1) {
                    *h = (*h + b).tanh();
                }
                mat_vec(&p.q2, dim, &hidden, &mut col);
                for (c, b) in col.iter_mut().zip(&p.b2) {
                    *c = (*c + b).tanh();
                }
            }
        }
        for m in 0..dim {
            entries[m * k_frames + k] = col[m];
        }
    }
    Ok(SignificanceMatrix {
        dim,
        frames: k_frames,
        entries,
    })
}

/// Row-wise softmax over frames: for each dimension m, a_m. = softmax_k(e_m.).
pub fn weights_from_significance(e: &SignificanceMatrix) -> WeightMatrix {
    let mut entries = e.entries.clone();
    for row in entries.chunks_mut(e.frames) {
        stable_softmax(row);
    }
    WeightMatrix {
        dim: e.dim,
        frames: e.frames,
        entries,
    }
}

/// Element-wise weighted sum: r_m = sum_k a_mk F_k[m].
pub fn aggregate(s: &FeatureSet, a: &WeightMatrix) -> Result<FeatureVector> {
    if a.dim != s.dim() || a.frames != s.len() {
        return Err(Error::DimensionMismatch {
            expected: s.dim() * s.len(),
            got: a.dim * a.frames,
        });
    }
    let mut out = vec![0.0; s.dim()];
    for (m, o) in out.iter_mut().enumerate() {
        let row = &a.entries[m * a.frames..(m + 1) * a.frames];
        *o = s
            .frames()
            .iter()
            .zip(row)
            .map(|(f, &w)| w * f[m])
            .sum();
    }
    FeatureVector::new(out)
}

/// Intermediates of one forward pass, retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// tanh(Q1 F_k + b1) per frame, cascaded mode only (empty in linear mode).
    pub hidden: Vec<Vec<f64>>,
    pub significance: SignificanceMatrix,
    pub weights: WeightMatrix,
    /// Pre-normalization aggregate r.
    pub raw: FeatureVector,
    pub raw_norm: f64,
    /// L2-normalized template r~.
    pub template: FeatureVector,
}

/// Full aggregation: significance -> per-dimension softmax -> weighted sum
/// -> L2 normalization.
pub fn forward(s: &FeatureSet, p: &AttentionParams) -> Result<FeatureVector> {
    Ok(forward_trace(s, p)?.template)
}

pub fn forward_trace(s: &FeatureSet, p: &AttentionParams) -> Result<ForwardTrace> {
    let dim = s.dim();
    if p.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: p.dim(),
        });
    }
    // Recompute significance while capturing hidden activations.
    let k_frames = s.len();
    let mut entries = vec![0.0; dim * k_frames];
    let mut hidden_all = Vec::new();
    let mut col = vec![0.0; dim];
    for (k, frame) in s.frames().iter().enumerate() {
        match p.mode {
            Mode::LinearSingleBlock => {
                mat_vec(&p.q1, dim, frame.values(), &mut col);
            }
            Mode::CascadedTanh => {
                let mut hidden = vec![0.0; dim];
                mat_vec(&p.q1, dim, frame.values(), &mut hidden);
                for (h, b) in hidden.iter_mut().zip(&p.b1) {
                    *h = (*h + b).tanh();
                }
                mat_vec(&p.q2, dim, &hidden, &mut col);
                for (c, b) in col.iter_mut().zip(&p.b2) {
                    *c = (*c + b).tanh();
                }
                hidden_all.push(hidden);
            }
        }
        for m in 0..dim {
            entries[m * k_frames + k] = col[m];
        }
    }
    let significance = SignificanceMatrix {
        dim,
        frames: k_frames,
        entries,
    };
    let weights = weights_from_significance(&significance);
    let raw = aggregate(s, &weights)?;
    let raw_norm = raw.norm();
    if raw_norm == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let template = FeatureVector::new(raw.values().iter().map(|x| x / raw_norm).collect())?;
    Ok(ForwardTrace {
        hidden: hidden_all,
        significance,
        weights,
        raw,
        raw_norm,
        template,
    })
}
