//! Python bindings: dataset generation, training, evaluation and the metric
//! helpers. Structured results come back as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use attrassist::datapipe::{self, DatasetManifest, Image, NormStats, Split, SyntheticSpec};
use attrassist::diffcore::Tensor;
use attrassist::evalkit::{self, EvalMode};
use attrassist::model::{Model, ModelConfig, ParameterSet};
use attrassist::trainer::{self, Checkpoint, TrainConfig, TrainData};
use attrassist::Error;

fn to_py(e: Error) -> PyErr {
    let msg = format!("{}: {e}", e.kind());
    match e {
        Error::Io { .. } | Error::Image { .. } => PyIOError::new_err(msg),
        Error::NonFinite(_) | Error::Checkpoint(_) => PyRuntimeError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn py_to_toml(value: &Bound<'_, PyAny>) -> PyResult<toml::Value> {
    if let Ok(b) = value.extract::<bool>() {
        return Ok(toml::Value::Boolean(b));
    }
    if let Ok(i) = value.extract::<i64>() {
        return Ok(toml::Value::Integer(i));
    }
    if let Ok(f) = value.extract::<f64>() {
        return Ok(toml::Value::Float(f));
    }
    if let Ok(s) = value.extract::<String>() {
        return Ok(toml::Value::String(s));
    }
    if let Ok(list) = value.cast::<PyList>() {
        return list.iter().map(|v| py_to_toml(&v)).collect::<PyResult<Vec<_>>>().map(toml::Value::Array);
    }
    Err(PyValueError::new_err(format!("unsupported config value {value}")))
}

/// Serialize `base`, overlay `overrides`, and parse it back through `parse`.
fn overlay<T: serde::Serialize>(
    base: &T,
    overrides: Option<&Bound<'_, PyDict>>,
    parse: impl Fn(&str) -> attrassist::Result<T>,
) -> PyResult<T> {
    let mut table = toml::Table::try_from(base).map_err(|e| PyValueError::new_err(e.to_string()))?;
    if let Some(kw) = overrides {
        for (k, v) in kw.iter() {
            table.insert(k.extract::<String>()?, py_to_toml(&v)?);
        }
    }
    parse(&toml::to_string(&table).map_err(|e| PyValueError::new_err(e.to_string()))?).map_err(to_py)
}

fn parse_split(split: &str) -> PyResult<Split> {
    split.parse().map_err(to_py)
}

fn parse_mode(mode: &str) -> PyResult<EvalMode> {
    match mode {
        "trained-head" => Ok(EvalMode::TrainedHead),
        "euclidean-centroid" => Ok(EvalMode::EuclideanCentroid),
        other => Err(PyValueError::new_err(format!("unknown eval mode {other:?}"))),
    }
}

fn rows_to_tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    Tensor::new(vec![rows.len(), cols], rows.concat()).map_err(to_py)
}

/// Synthetic dataset description; keyword arguments override the defaults.
#[pyclass(name = "SyntheticSpec", module = "attrassist", skip_from_py_object)]
#[derive(Clone)]
struct PySyntheticSpec {
    inner: SyntheticSpec,
}

#[pymethods]
impl PySyntheticSpec {
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let inner = overlay(&SyntheticSpec::default(), overrides, SyntheticSpec::from_toml)?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: SyntheticSpec::from_toml(text).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        toml::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Render the dataset into `out`; returns the manifest path.
    fn generate(&self, out: PathBuf) -> PyResult<PathBuf> {
        datapipe::generate_synthetic(&self.inner, &out).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("SyntheticSpec({:?})", self.inner)
    }
}

/// Training configuration; keyword arguments override the defaults.
#[pyclass(name = "TrainConfig", module = "attrassist", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let inner = overlay(&TrainConfig::default(), overrides, TrainConfig::from_toml)?;
        inner.validate().map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: TrainConfig::load(&path).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: TrainConfig::from_toml(text).map_err(to_py)?,
        })
    }

    /// Copy with some fields replaced.
    #[pyo3(signature = (**overrides))]
    fn replace(&self, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        Ok(Self {
            inner: overlay(&self.inner, overrides, TrainConfig::from_toml)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.inner)
    }

    #[getter]
    fn batch_size(&self) -> usize {
        self.inner.batch_size()
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig({:?})", self.inner)
    }
}

/// A trained model with its parameters, center bank and run history.
#[pyclass(name = "Run", module = "attrassist")]
struct PyRun {
    model: ModelConfig,
    ckpt: Checkpoint,
}

impl PyRun {
    fn from_checkpoint(ckpt: Checkpoint) -> Self {
        Self {
            model: ckpt.model.clone(),
            ckpt,
        }
    }

    fn parts(&self) -> PyResult<(Model, &ParameterSet)> {
        Ok((Model::new(self.model.clone()).map_err(to_py)?, &self.ckpt.params))
    }
}

#[pymethods]
impl PyRun {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self::from_checkpoint(trainer::load_checkpoint(&path).map_err(to_py)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        trainer::save_checkpoint(&self.ckpt, &path).map_err(to_py)
    }

    /// Per-epoch metrics as a list of dicts.
    #[getter]
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.ckpt.state.history)
    }

    #[getter]
    fn config(&self) -> PyTrainConfig {
        PyTrainConfig {
            inner: self.ckpt.config.clone(),
        }
    }

    /// Attribute id → center vector, or `None` for runs without the attribute term.
    #[getter]
    fn centers<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.ckpt.bank.as_ref().map(|b| b.centers().clone()))
    }

    /// Continue training up to `epochs` total.
    #[pyo3(signature = (manifest, epochs, out=None))]
    fn resume(&self, manifest: PathBuf, epochs: usize, out: Option<PathBuf>) -> PyResult<Self> {
        let cfg = &self.ckpt.config;
        let data = TrainData::load(&manifest, cfg.resolution, cfg.workers).map_err(to_py)?;
        let outcome = trainer::resume(self.ckpt.clone(), &data, out.as_deref(), Some(epochs)).map_err(to_py)?;
        Ok(Self::from_checkpoint(outcome.checkpoint()))
    }

    /// Evaluation report for a split as a dict.
    #[pyo3(signature = (manifest, split="test", resolution=None, mode="trained-head"))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        manifest: PathBuf,
        split: &str,
        resolution: Option<usize>,
        mode: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        let (model, params) = self.parts()?;
        let m = DatasetManifest::load(&manifest).map_err(to_py)?;
        let norm = NormStats::load(&NormStats::sidecar_path(&manifest)).map_err(to_py)?;
        let res = resolution.unwrap_or(self.model.input_resolution);
        let report = evalkit::evaluate(&model, params, &m, &norm, parse_split(split)?, res, parse_mode(mode)?, 1)
            .map_err(to_py)?;
        json_to_py(py, &report)
    }

    /// Write features.csv and pca.csv into `out`; returns the two PCA variances.
    #[pyo3(signature = (manifest, out, split="test"))]
    fn export_features(&self, manifest: PathBuf, out: PathBuf, split: &str) -> PyResult<(f64, f64)> {
        let (model, params) = self.parts()?;
        let m = DatasetManifest::load(&manifest).map_err(to_py)?;
        let norm = NormStats::load(&NormStats::sidecar_path(&manifest)).map_err(to_py)?;
        let pca = evalkit::export_features(&model, params, &m, &norm, parse_split(split)?, self.model.input_resolution, &out)
            .map_err(to_py)?;
        Ok((pca.variances[0], pca.variances[1]))
    }

    /// Eval-mode (features, logits) for an `N×C×H×W` batch given as nested rows.
    fn infer(&self, images: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let (model, params) = self.parts()?;
        let r = self.model.input_resolution;
        let c = self.model.in_channels;
        let n = images.len();
        let flat = rows_to_tensor(images)?;
        let batch = flat.reshape(&[n, c, r, r]).map_err(to_py)?;
        let (f, l) = model.infer(params, &batch).map_err(to_py)?;
        let rows = |t: &Tensor| t.data().chunks(t.shape()[1]).map(<[f64]>::to_vec).collect();
        Ok((rows(&f), rows(&l)))
    }

    fn __repr__(&self) -> String {
        format!("Run(epochs={}, model={:?})", self.ckpt.state.epoch, self.model)
    }
}

/// Train on a manifest; checkpoints and metrics go to `out` when given.
#[pyfunction]
#[pyo3(signature = (config, manifest, out=None))]
fn train(config: &PyTrainConfig, manifest: PathBuf, out: Option<PathBuf>) -> PyResult<PyRun> {
    let cfg = &config.inner;
    let data = TrainData::load(&manifest, cfg.resolution, cfg.workers).map_err(to_py)?;
    let outcome = trainer::train(cfg, &data, out.as_deref()).map_err(to_py)?;
    Ok(PyRun::from_checkpoint(outcome.checkpoint()))
}

/// Bicubic resize of an `H×W×C` image given as a flat row-major list.
#[pyfunction]
fn bicubic_resize(data: Vec<f64>, height: usize, width: usize, channels: usize, target: (usize, usize)) -> PyResult<Vec<f64>> {
    let img = Image::new(height, width, channels, data).map_err(to_py)?;
    Ok(datapipe::bicubic_resize(&img, target.0, target.1).map_err(to_py)?.data().to_vec())
}

/// Top-k accuracy in percent over rows of scores.
#[pyfunction]
fn top_k_accuracy(scores: Vec<Vec<f64>>, labels: Vec<usize>, k: usize) -> PyResult<f64> {
    evalkit::top_k_accuracy(&rows_to_tensor(scores)?, &labels, k).map_err(to_py)
}

/// Mean intra-group over mean inter-group pairwise distance.
#[pyfunction]
fn cohesion_ratio(features: Vec<Vec<f64>>, groups: Vec<usize>) -> PyResult<f64> {
    evalkit::cohesion_ratio(&rows_to_tensor(features)?, &groups).map_err(to_py)
}

/// Step-decayed learning rate for an epoch.
#[pyfunction]
fn lr_at(epoch: usize, lr0: f64, lr_step: usize) -> f64 {
    trainer::lr_at(epoch, lr0, lr_step)
}

#[pymodule(name = "attrassist")]
pub fn attrassist_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySyntheticSpec>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(bicubic_resize, m)?)?;
    m.add_function(wrap_pyfunction!(top_k_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(cohesion_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    Ok(())
}
