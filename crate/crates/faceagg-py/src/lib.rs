//! Python bindings for the faceagg set-aggregation engine.
//!
//! Exposes the core types (feature sets, aggregation parameters, corpora,
//! trained models) plus the pooling, forward, training, gradient-check and
//! verification entry points. Vectors cross the boundary as plain Python
//! lists of floats; matrices as lists of rows.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use faceagg::attention::{forward, forward_trace, AttentionParams, Mode};
use faceagg::eval::{verify as core_verify, Aggregator, Metric, PairList};
use faceagg::grad::{finite_diff_check, margin_loss, MarginHead};
use faceagg::io;
use faceagg::pool::{self, NanParams};
use faceagg::rng::SplitMix64;
use faceagg::synth::{self, LabeledCorpus, SynthConfig};
use faceagg::trainer::{self, Model, ModelKind, TrainConfig};
use faceagg::types::{FeatureSet, FeatureVector};

fn py_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn vector(values: Vec<f64>) -> PyResult<FeatureVector> {
    FeatureVector::new(values).map_err(py_err)
}

fn flatten_square(dim: usize, rows: Vec<Vec<f64>>, name: &str) -> PyResult<Vec<f64>> {
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(PyValueError::new_err(format!("{name} must be {dim}x{dim}")));
    }
    Ok(rows.into_iter().flatten().collect())
}

fn parse_mode(mode: &str) -> PyResult<Mode> {
    match mode {
        "linear" => Ok(Mode::LinearSingleBlock),
        "cascaded" => Ok(Mode::CascadedTanh),
        other => Err(PyValueError::new_err(format!(
            "unknown mode {other:?}; expected \"linear\" or \"cascaded\""
        ))),
    }
}

fn parse_kind(kind: &str) -> PyResult<ModelKind> {
    match kind {
        "linear" => Ok(ModelKind::LinearSingleBlock),
        "cascaded" => Ok(ModelKind::CascadedTanh),
        "frame_level" => Ok(ModelKind::FrameLevel),
        other => Err(PyValueError::new_err(format!(
            "unknown model kind {other:?}; expected \"linear\", \"cascaded\" or \"frame_level\""
        ))),
    }
}

/// A labelled set of unit-norm feature vectors (one set = one video/template).
#[pyclass(name = "FeatureSet")]
#[derive(Clone)]
struct PyFeatureSet {
    inner: FeatureSet,
}

#[pymethods]
impl PyFeatureSet {
    #[new]
    fn new(frames: Vec<Vec<f64>>, label: u32, set_id: String) -> PyResult<Self> {
        let frames = frames
            .into_iter()
            .map(vector)
            .collect::<PyResult<Vec<_>>>()?;
        Ok(Self {
            inner: FeatureSet::new(frames, label, set_id).map_err(py_err)?,
        })
    }

    #[getter]
    fn label(&self) -> u32 {
        self.inner.label
    }

    #[getter]
    fn set_id(&self) -> String {
        self.inner.set_id.clone()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn frames(&self) -> Vec<Vec<f64>> {
        self.inner
            .frames()
            .iter()
            .map(|f| f.values().to_vec())
            .collect()
    }
}

/// Parameters of the dimension-wise attention aggregator.
#[pyclass(name = "AttentionParams")]
#[derive(Clone)]
struct PyAttentionParams {
    inner: AttentionParams,
}

#[pymethods]
impl PyAttentionParams {
    /// All-zero parameters; the forward pass then equals normalized
    /// average pooling.
    #[staticmethod]
    fn zeros(dim: usize, mode: &str) -> PyResult<Self> {
        Ok(Self {
            inner: AttentionParams::zeros(dim, parse_mode(mode)?),
        })
    }

    /// Single linear block: significance E_k = Q @ F_k.
    #[staticmethod]
    fn linear(q: Vec<Vec<f64>>) -> PyResult<Self> {
        let dim = q.len();
        let flat = flatten_square(dim, q, "q")?;
        Ok(Self {
            inner: AttentionParams::linear(dim, flat).map_err(py_err)?,
        })
    }

    /// Cascaded blocks: E_k = tanh(Q2 @ tanh(Q1 @ F_k + b1) + b2).
    #[staticmethod]
    fn cascaded(
        q1: Vec<Vec<f64>>,
        b1: Vec<f64>,
        q2: Vec<Vec<f64>>,
        b2: Vec<f64>,
    ) -> PyResult<Self> {
        let dim = b1.len();
        let q1 = flatten_square(dim, q1, "q1")?;
        let q2 = flatten_square(dim, q2, "q2")?;
        Ok(Self {
            inner: AttentionParams::cascaded(dim, q1, b1, q2, b2).map_err(py_err)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn mode(&self) -> &'static str {
        match self.inner.mode {
            Mode::LinearSingleBlock => "linear",
            Mode::CascadedTanh => "cascaded",
        }
    }

    /// Aggregate a set into its unit-norm template.
    fn template(&self, s: &PyFeatureSet) -> PyResult<Vec<f64>> {
        Ok(forward(&s.inner, &self.inner)
            .map_err(py_err)?
            .into_values())
    }

    /// Per-dimension softmax weights, as an M x K matrix (rows sum to 1).
    fn weights(&self, s: &PyFeatureSet) -> PyResult<Vec<Vec<f64>>> {
        let trace = forward_trace(&s.inner, &self.inner).map_err(py_err)?;
        let (m_dims, k_frames) = (s.inner.dim(), s.inner.len());
        Ok((0..m_dims)
            .map(|m| (0..k_frames).map(|k| trace.weights.get(m, k)).collect())
            .collect())
    }
}

/// Additive-angular-margin classification head.
#[pyclass(name = "MarginHead")]
#[derive(Clone)]
struct PyMarginHead {
    inner: MarginHead,
}

#[pymethods]
impl PyMarginHead {
    /// Unit-norm random class weights from a seeded generator.
    #[new]
    #[pyo3(signature = (dim, num_classes, seed, margin = 0.2, scale = 16.0))]
    fn new(dim: usize, num_classes: usize, seed: u64, margin: f64, scale: f64) -> Self {
        let mut rng = SplitMix64::new(seed);
        Self {
            inner: MarginHead::random_unit(dim, num_classes, &mut rng).with_margin(margin, scale),
        }
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    /// Margin cross-entropy loss of a unit-norm template against a label.
    fn loss(&self, template: Vec<f64>, label: u32) -> PyResult<f64> {
        margin_loss(&vector(template)?, label, &self.inner).map_err(py_err)
    }
}

/// A generated corpus of labelled feature sets.
#[pyclass(name = "Corpus")]
#[derive(Clone)]
struct PyCorpus {
    inner: LabeledCorpus,
}

#[pymethods]
impl PyCorpus {
    /// Generate a synthetic corpus of unit-sphere identity clusters with
    /// optional dimension-localized degradation.
    #[staticmethod]
    #[pyo3(signature = (
        dim = 64, num_identities = 10, sets_per_identity = 5,
        frames_per_set_min = 4, frames_per_set_max = 12,
        intra_class_noise_sigma = 0.1, degrade_fraction = 0.0,
        corrupt_dims_fraction = 0.0, corrupt_noise_sigma = 1.0, rng_seed = 1
    ))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        dim: usize,
        num_identities: usize,
        sets_per_identity: usize,
        frames_per_set_min: usize,
        frames_per_set_max: usize,
        intra_class_noise_sigma: f64,
        degrade_fraction: f64,
        corrupt_dims_fraction: f64,
        corrupt_noise_sigma: f64,
        rng_seed: u64,
    ) -> PyResult<Self> {
        let cfg = SynthConfig {
            dim,
            num_identities,
            sets_per_identity,
            frames_per_set_min,
            frames_per_set_max,
            intra_class_noise_sigma,
            degrade_fraction,
            corrupt_dims_fraction,
            corrupt_noise_sigma,
            rng_seed,
        };
        Ok(Self {
            inner: synth::generate(&cfg).map_err(py_err)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn num_identities(&self) -> usize {
        self.inner.num_identities()
    }

    fn __len__(&self) -> usize {
        self.inner.sets.len()
    }

    fn set(&self, index: usize) -> PyResult<PyFeatureSet> {
        let inner = self
            .inner
            .sets
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("set index {index} out of range")))?
            .clone();
        Ok(PyFeatureSet { inner })
    }

    /// Identity-disjoint train/test folds.
    fn split(&self, folds: usize) -> PyResult<Vec<(PyCorpus, PyCorpus)>> {
        Ok(synth::split(&self.inner, folds)
            .map_err(py_err)?
            .into_iter()
            .map(|(a, b)| (PyCorpus { inner: a }, PyCorpus { inner: b }))
            .collect())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::write_corpus(path, &self.inner).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: io::read_corpus(path).map_err(py_err)?,
        })
    }
}

/// A trained aggregator (attention or frame-level) plus its margin head.
#[pyclass(name = "TrainedModel")]
#[derive(Clone)]
struct PyTrainedModel {
    model: Model,
    head: MarginHead,
}

#[pymethods]
impl PyTrainedModel {
    #[getter]
    fn kind(&self) -> &'static str {
        match self.model.kind() {
            ModelKind::LinearSingleBlock => "linear",
            ModelKind::CascadedTanh => "cascaded",
            ModelKind::FrameLevel => "frame_level",
        }
    }

    #[getter]
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn template(&self, s: &PyFeatureSet) -> PyResult<Vec<f64>> {
        Ok(self
            .model
            .aggregator()
            .template(&s.inner)
            .map_err(py_err)?
            .into_values())
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::write_params(path, &self.model, &self.head).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (model, head) = io::read_params(path).map_err(py_err)?;
        Ok(Self { model, head })
    }
}

/// L2-normalize a vector.
#[pyfunction]
fn l2_normalize(v: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(pool::l2_normalize(&vector(v)?)
        .map_err(py_err)?
        .into_values())
}

/// Component-wise average of a set's frames (not normalized).
#[pyfunction]
fn avg_pool(s: &PyFeatureSet) -> Vec<f64> {
    pool::avg_pool(&s.inner).into_values()
}

/// Component-wise maximum of a set's frames.
#[pyfunction]
fn max_pool(s: &PyFeatureSet) -> Vec<f64> {
    pool::max_pool(&s.inner).into_values()
}

/// Frame-level attention baseline: one softmax weight per frame from the
/// scores q . F_k, then a weighted average (not normalized).
#[pyfunction]
fn nan_aggregate(s: &PyFeatureSet, q: Vec<f64>) -> PyResult<Vec<f64>> {
    let p = NanParams { q: vector(q)? };
    Ok(pool::nan_aggregate(&s.inner, &p)
        .map_err(py_err)?
        .into_values())
}

/// Train an aggregator with the momentum-SGD margin-loss loop.
///
/// Labels must be contiguous from 0. Returns the trained model and the
/// loss history as (epoch, batch, loss) tuples.
#[pyfunction]
#[pyo3(signature = (
    corpus, kind = "cascaded", learning_rate = 0.05, batch_size = 8, epochs = 10,
    frames_per_sampled_set_min = 8, frames_per_sampled_set_max = 8, rng_seed = 1,
    margin = 0.2, scale = 16.0, momentum = 0.9, weight_decay = 0.0
))]
#[allow(clippy::too_many_arguments)]
fn train(
    corpus: &PyCorpus,
    kind: &str,
    learning_rate: f64,
    batch_size: usize,
    epochs: usize,
    frames_per_sampled_set_min: usize,
    frames_per_sampled_set_max: usize,
    rng_seed: u64,
    margin: f64,
    scale: f64,
    momentum: f64,
    weight_decay: f64,
) -> PyResult<(PyTrainedModel, Vec<(usize, usize, f64)>)> {
    let cfg = TrainConfig {
        learning_rate,
        batch_size,
        epochs,
        frames_per_sampled_set_min,
        frames_per_sampled_set_max,
        rng_seed,
        mode: parse_kind(kind)?,
        margin_m: margin,
        scale_s: scale,
        momentum,
        weight_decay,
    };
    let (ckpt, history) = trainer::train(&corpus.inner, &cfg).map_err(py_err)?;
    Ok((
        PyTrainedModel {
            model: ckpt.model,
            head: ckpt.head,
        },
        history
            .into_iter()
            .map(|r| (r.epoch, r.batch, r.loss))
            .collect(),
    ))
}

/// Exhaustive verification over a corpus: returns ([(far, tar)], auc).
///
/// `method` is "avg", "max" or "model"; the latter requires `model`.
#[pyfunction]
#[pyo3(signature = (corpus, method = "avg", far_levels = vec![0.001, 0.01, 0.1], model = None))]
fn verify(
    corpus: &PyCorpus,
    method: &str,
    far_levels: Vec<f64>,
    model: Option<&PyTrainedModel>,
) -> PyResult<(Vec<(f64, f64)>, f64)> {
    let aggregator = match method {
        "avg" => Aggregator::Average,
        "max" => Aggregator::Max,
        "model" => model
            .ok_or_else(|| PyValueError::new_err("method \"model\" requires model="))?
            .model
            .aggregator(),
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown method {other:?}; expected \"avg\", \"max\" or \"model\""
            )))
        }
    };
    let pairs = PairList::exhaustive(&corpus.inner).map_err(py_err)?;
    core_verify(&corpus.inner, &pairs, &aggregator, Metric::Cosine, &far_levels).map_err(py_err)
}

/// Max relative error of analytic vs central-difference gradients on a
/// random seeded instance; values below 1e-4 indicate a correct backward
/// pass.
#[pyfunction]
#[pyo3(signature = (dim = 8, frames = 3, classes = 4, seed = 1))]
fn gradcheck(dim: usize, frames: usize, classes: usize, seed: u64) -> PyResult<f64> {
    let mut rng = SplitMix64::new(seed);
    let frames = (0..frames)
        .map(|_| FeatureVector::new(rng.gaussian_vec(dim, 1.0)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(py_err)?;
    let s = FeatureSet::new(frames, 0, "gradcheck").map_err(py_err)?;
    let p = AttentionParams::cascaded(
        dim,
        rng.gaussian_vec(dim * dim, 0.4),
        rng.gaussian_vec(dim, 0.4),
        rng.gaussian_vec(dim * dim, 0.4),
        rng.gaussian_vec(dim, 0.4),
    )
    .map_err(py_err)?;
    let head = MarginHead::random_unit(dim, classes, &mut rng).with_margin(0.3, 4.0);
    let label = (seed % classes as u64) as u32;
    finite_diff_check(&s, &p, &head, label, 1e-5).map_err(py_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_square_accepts_exact_shape() {
        let flat = flatten_square(2, vec![vec![1.0, 2.0], vec![3.0, 4.0]], "q").unwrap();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn flatten_square_rejects_ragged_rows() {
        assert!(flatten_square(2, vec![vec![1.0], vec![3.0, 4.0]], "q").is_err());
        assert!(flatten_square(3, vec![vec![0.0; 3]; 2], "q").is_err());
    }

    #[test]
    fn mode_and_kind_parsing() {
        assert_eq!(parse_mode("linear").unwrap(), Mode::LinearSingleBlock);
        assert_eq!(parse_mode("cascaded").unwrap(), Mode::CascadedTanh);
        assert!(parse_mode("softmax").is_err());
        assert_eq!(parse_kind("frame_level").unwrap(), ModelKind::FrameLevel);
        assert!(parse_kind("bogus").is_err());
    }
}

#[pymodule]
fn faceagg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFeatureSet>()?;
    m.add_class::<PyAttentionParams>()?;
    m.add_class::<PyMarginHead>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyTrainedModel>()?;
    m.add_function(wrap_pyfunction!(l2_normalize, m)?)?;
    m.add_function(wrap_pyfunction!(avg_pool, m)?)?;
    m.add_function(wrap_pyfunction!(max_pool, m)?)?;
    m.add_function(wrap_pyfunction!(nan_aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
