use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;

use axgcn::fusion::{fusion_weights, FusionParams};
use axgcn::metrics::{Confusion, Metrics};
use axgcn::model::ModelConfig;
use axgcn::skeleton::{parse_session_str, read_session, write_session, SkeletonSequence};
use axgcn::synth::{generate_dataset, load_dataset, GeneratorSpec};
use axgcn::train::{evaluate, train, TrainedModel};
use axgcn::Error;

create_exception!(axgcn_py, DataError, PyException);
create_exception!(axgcn_py, NumericalError, PyException);

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Parameter(_) => PyValueError::new_err(msg),
        Error::Io { .. } => PyOSError::new_err(msg),
        _ if e.exit_code() == 3 => NumericalError::new_err(msg),
        _ => DataError::new_err(msg),
    }
}

/// A parsed skeleton session.
#[pyclass(name = "Session")]
struct PySession {
    inner: SkeletonSequence,
}

#[pymethods]
impl PySession {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        read_session(&path).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        parse_session_str(text).map(|inner| Self { inner }).map_err(to_py)
    }

    fn to_text(&self) -> String {
        write_session(&self.inner)
    }

    #[getter]
    fn session_id(&self) -> String {
        self.inner.session_id.clone()
    }

    #[getter]
    fn fps(&self) -> f64 {
        self.inner.fps
    }

    /// "ASD", "TD", or None.
    #[getter]
    fn label(&self) -> Option<String> {
        self.inner.label.class_index().map(|_| self.inner.label.to_string())
    }

    /// Frame `i` as 17 `(x, y, confidence)` triples.
    fn frame(&self, i: usize) -> PyResult<Vec<(f64, f64, f64)>> {
        let f = self
            .inner
            .frames
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("frame {i} out of range")))?;
        Ok(f.joints.iter().map(|j| (j.x, j.y, j.confidence)).collect())
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Session(id={:?}, frames={}, fps={}, label={})",
            self.inner.session_id,
            self.inner.len(),
            self.inner.fps,
            self.inner.label
        )
    }
}

/// A model: configuration, parameters, and graph masks.
#[pyclass(name = "Model")]
struct PyModel {
    inner: TrainedModel,
}

fn parse_config(config_json: Option<&str>) -> PyResult<ModelConfig> {
    match config_json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("bad config: {e}"))),
        None => Ok(ModelConfig::default()),
    }
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
    let d = pyo3::types::PyDict::new(py);
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("uar", m.uar)?;
    d.set_item("confusion", m.confusion.0.iter().map(|r| r.to_vec()).collect::<Vec<_>>())?;
    Ok(d)
}

#[pymethods]
impl PyModel {
    /// Untrained model from a JSON ModelConfig (defaults when omitted).
    #[new]
    #[pyo3(signature = (config_json=None))]
    fn new(config_json: Option<&str>) -> PyResult<Self> {
        let cfg = parse_config(config_json)?;
        TrainedModel::init(cfg).map(|inner| Self { inner }).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        axgcn::model_file::load_model(&path).map(|inner| Self { inner }).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        axgcn::model_file::save_model(&self.inner, &path).map_err(to_py)
    }

    /// Trains on every session file in `data_dir`; returns the model and the
    /// per-epoch `(loss, train_accuracy)` history.
    #[staticmethod]
    #[pyo3(signature = (data_dir, config_json=None))]
    fn train(data_dir: PathBuf, config_json: Option<&str>) -> PyResult<(Self, Vec<(f64, f64)>)> {
        let cfg = parse_config(config_json)?;
        let data = load_dataset(&data_dir).map_err(to_py)?;
        let (inner, hist) = train(&data, &cfg).map_err(to_py)?;
        Ok((Self { inner }, hist.iter().map(|h| (h.mean_loss, h.train_accuracy)).collect()))
    }

    /// Class probabilities `[P(ASD), P(TD)]`.
    fn predict(&self, session: &PySession) -> PyResult<Vec<f64>> {
        self.inner.predict(&session.inner).map(|p| p.probabilities).map_err(to_py)
    }

    fn evaluate<'py>(&self, py: Python<'py>, data_dir: PathBuf) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        let data = load_dataset(&data_dir).map_err(to_py)?;
        let m = evaluate(&self.inner, &data).map_err(to_py)?;
        metrics_dict(py, &m)
    }

    #[getter]
    fn config_json(&self) -> String {
        serde_json::to_string(&self.inner.config).expect("config serialises")
    }

    /// `(name, shape)` of every parameter.
    fn parameters(&self) -> Vec<(String, Vec<usize>)> {
        self.inner
            .params
            .iter()
            .map(|(k, t)| (k.clone(), t.shape().to_vec()))
            .collect()
    }

    fn parameter_count(&self) -> usize {
        self.inner.params.count()
    }
}

#[pyfunction]
#[pyo3(signature = (out, n_asd, n_td, seed, mode="clip", separation=1.0, fps=17.0, noise=1.5))]
#[allow(clippy::too_many_arguments)]
fn synth(
    out: PathBuf,
    n_asd: usize,
    n_td: usize,
    seed: u64,
    mode: &str,
    separation: f64,
    fps: f64,
    noise: f64,
) -> PyResult<Vec<String>> {
    let spec = GeneratorSpec {
        n_asd,
        n_td,
        mode: mode.parse().map_err(to_py)?,
        fps,
        separation,
        seed,
        noise,
    };
    let recs = generate_dataset(&spec, &out).map_err(to_py)?;
    Ok(recs.into_iter().map(|r| r.id).collect())
}

#[pyfunction]
#[pyo3(name = "fusion_weights")]
fn py_fusion_weights(omega: Vec<f64>, lam: f64) -> PyResult<Vec<f64>> {
    fusion_weights(&FusionParams { omega, lambda: lam }).map_err(to_py)
}

/// Accuracy, UAR, and confusion from a 2×2 confusion matrix.
#[pyfunction]
fn metrics(py: Python<'_>, confusion: [[u64; 2]; 2]) -> PyResult<Bound<'_, pyo3::types::PyDict>> {
    let m = Metrics::from_confusion(Confusion(confusion)).map_err(to_py)?;
    metrics_dict(py, &m)
}

/// Maximum relative finite-difference error of the reduced full model.
#[pyfunction]
#[pyo3(signature = (seed=7, eps=1e-5))]
fn gradcheck(seed: u64, eps: f64) -> PyResult<f64> {
    axgcn::model::gradcheck_model(seed, eps)
        .map(|r| r.max_relative_error)
        .map_err(to_py)
}

#[pymodule]
fn axgcn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySession>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(py_fusion_weights, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("DataError", m.py().get_type::<DataError>())?;
    m.add("NumericalError", m.py().get_type::<NumericalError>())?;
    Ok(())
}
