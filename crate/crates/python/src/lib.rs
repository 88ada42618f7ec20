use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sfmim::data::{build_splits, load_dataset, synth_generate, SynthSpec};
use sfmim::masking::{self, FilterKind, FrequencyFilterSpec, MaskMode};
use sfmim::metrics::{ConfusionMatrix, MetricsReport};
use sfmim::model::checkpoint::{load_with_meta, save_checkpoint, CheckpointMeta};
use sfmim::model::{ModelConfig, ModelParams, PositionalKind};
use sfmim::rng;
use sfmim::tensor::{ComplexVector, Tensor};
use sfmim::training::{self, Split, TrainConfig, TrainLog, TrainingData};
use sfmim::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Training(_) | Error::UndefinedMetric(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} '{s}'")))
}

fn tokens(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(py_err)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.row(i).to_vec()).collect()
}

/// Stored half spectrum of a real vector as (re, im) pairs.
#[pyfunction]
fn rdft(x: Vec<f64>) -> PyResult<Vec<(f64, f64)>> {
    let xf = masking::rdft(&x).map_err(py_err)?;
    Ok((0..xf.len()).map(|k| xf.get(k)).collect())
}

#[pyfunction]
fn irdft(spectrum: Vec<(f64, f64)>, bands: usize) -> PyResult<Vec<f64>> {
    let mut xf = ComplexVector::zeros(spectrum.len());
    for (k, v) in spectrum.into_iter().enumerate() {
        xf.set(k, v);
    }
    masking::irdft(&xf, bands).map_err(py_err)
}

/// Low- or high-pass filtered copy of one spectrum.
#[pyfunction]
#[pyo3(signature = (x, gamma, kind = "low"))]
fn frequency_filter(x: Vec<f64>, gamma: f64, kind: &str) -> PyResult<Vec<f64>> {
    let kind = match kind {
        "low" => FilterKind::LowPass,
        "high" => FilterKind::HighPass,
        other => return Err(PyValueError::new_err(format!("filter kind must be 'low' or 'high', got '{other}'"))),
    };
    let spec = FrequencyFilterSpec::new(kind, gamma, x.len()).map_err(py_err)?;
    masking::frequency_mask_token(&x, &spec).map_err(py_err)
}

#[pyfunction]
fn mask_count(n: usize, ratio: f64) -> usize {
    masking::masked_count(n, ratio)
}

#[pyfunction]
#[pyo3(signature = (n, ratio, seed = 0))]
fn spatial_mask(n: usize, ratio: f64, seed: u64) -> PyResult<Vec<bool>> {
    let m = masking::sample_spatial_mask(n, ratio, &mut rng::stream(seed, &[])).map_err(py_err)?;
    Ok(m.flags().to_vec())
}

#[pyclass(name = "Metrics", frozen)]
struct PyMetrics {
    inner: MetricsReport,
}

#[pymethods]
impl PyMetrics {
    #[staticmethod]
    fn from_labels(truth: Vec<u32>, pred: Vec<u32>, classes: usize) -> PyResult<Self> {
        let inner = MetricsReport::from_labels(&truth, &pred, classes).map_err(py_err)?;
        Ok(PyMetrics { inner })
    }

    #[staticmethod]
    fn from_confusion(rows: Vec<Vec<u64>>) -> PyResult<Self> {
        let cm = ConfusionMatrix::from_rows(&rows).map_err(py_err)?;
        Ok(PyMetrics { inner: MetricsReport::from_confusion(cm).map_err(py_err)? })
    }

    #[getter]
    fn oa(&self) -> f64 {
        self.inner.oa
    }

    #[getter]
    fn aa(&self) -> f64 {
        self.inner.aa
    }

    #[getter]
    fn kappa(&self) -> f64 {
        self.inner.kappa
    }

    #[getter]
    fn per_class_recall(&self) -> Vec<f64> {
        self.inner.per_class_recall.clone()
    }

    #[getter]
    fn confusion(&self) -> Vec<Vec<u64>> {
        self.inner.confusion.rows()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn __repr__(&self) -> String {
        format!("Metrics(oa={:.4}, aa={:.4}, kappa={:.4})", self.inner.oa, self.inner.aa, self.inner.kappa)
    }
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: TrainingData,
}

#[pymethods]
impl PyDataset {
    /// Loads a dataset sidecar JSON; its split file is required.
    #[staticmethod]
    fn load(sidecar: PathBuf) -> PyResult<Self> {
        let ds = load_dataset(&sidecar).map_err(py_err)?;
        Ok(PyDataset { inner: TrainingData::from_dataset(&ds).map_err(py_err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (seed = 0, hw = 48, bands = 48, classes = 4, sigma = 0.1, train_per_class = 20))]
    fn synth(seed: u64, hw: usize, bands: usize, classes: usize, sigma: f64, train_per_class: usize) -> PyResult<Self> {
        let (cube, labels) = synth_generate(&SynthSpec::new(seed, hw, bands, classes, sigma)).map_err(py_err)?;
        let splits = build_splits(&labels, train_per_class, seed).map_err(py_err)?;
        Ok(PyDataset { inner: TrainingData::new(&cube, labels, splits).map_err(py_err)? })
    }

    #[getter]
    fn bands(&self) -> usize {
        self.inner.cube.bands()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let c = &self.inner.cube;
        (c.height(), c.width(), c.bands())
    }

    /// Number of pixels in "train", "test" or "unlabeled".
    fn split_size(&self, split: &str) -> PyResult<usize> {
        Ok(self.inner.coords(parse::<Split>("split", split)?).len())
    }

    /// Standardized token sequence for the patch centred at (row, col).
    fn patch(&self, row: usize, col: usize, patch_size: usize) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.tokens((row, col), patch_size).map_err(py_err)?))
    }
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (
        patch_size, bands, classes, embed_dim = 64, depth = 5, heads = 4, mlp_ratio = 4,
        dropout = 0.1, positional = "learned", seed = 0
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        patch_size: usize,
        bands: usize,
        classes: usize,
        embed_dim: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
        dropout: f64,
        positional: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            patch_size,
            embed_dim,
            depth,
            heads,
            mlp_ratio,
            dropout,
            positional: parse::<PositionalKind>("positional encoding", positional)?,
            ..ModelConfig::standard(bands, classes)
        };
        Ok(PyModel { inner: ModelParams::init(&config, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = load_with_meta(&path).map_err(py_err)?;
        Ok(PyModel { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let meta = CheckpointMeta { config: self.inner.config.clone(), epoch: 0, loss: None, metrics: None };
        save_checkpoint(&path, &self.inner, &meta).map_err(py_err)
    }

    /// Model configuration as JSON.
    #[getter]
    fn config(&self) -> String {
        serde_json::to_string(&self.inner.config).expect("config serializes")
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.named().into_iter().map(|(n, _)| n).collect()
    }

    fn logits(&self, tokens: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.logits(&self::tokens(tokens)?).map_err(py_err)
    }

    /// 1-based class label.
    fn predict(&self, tokens: Vec<Vec<f64>>) -> PyResult<u32> {
        self.inner.predict(&self::tokens(tokens)?).map_err(py_err)
    }

    #[pyo3(signature = (tokens, mask = None))]
    fn reconstruct(&self, tokens: Vec<Vec<f64>>, mask: Option<Vec<bool>>) -> PyResult<Vec<Vec<f64>>> {
        let mask = mask.map(masking::SpatialMask::from_flags);
        let out = self.inner.reconstruct(&self::tokens(tokens)?, mask.as_ref()).map_err(py_err)?;
        Ok(rows(&out))
    }
}

/// Masked pretraining. Returns the final model and the per-epoch losses.
#[pyfunction]
#[pyo3(signature = (data, model, epochs = 200, mask = "dual", ratio = 0.7, gamma = 0.3, batch_size = 64, lr = 1e-3, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn pretrain(
    py: Python<'_>,
    data: &PyDataset,
    model: &PyModel,
    epochs: usize,
    mask: &str,
    ratio: f64,
    gamma: f64,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> PyResult<(PyModel, Vec<f64>)> {
    let cfg = TrainConfig {
        mask_mode: parse::<MaskMode>("mask mode", mask)?,
        epochs,
        ratio,
        gamma,
        batch_size,
        lr,
        seed,
        ..TrainConfig::pretrain()
    };
    let init = model.inner.clone();
    let out = py
        .detach(|| training::pretrain(&data.inner, &init.config, &cfg, Some(init.clone()), &mut TrainLog::disabled()))
        .map_err(py_err)?;
    let losses = out.history.iter().filter_map(|r| r.loss).collect();
    Ok((PyModel { inner: out.last }, losses))
}

/// Supervised fine-tuning. Returns the best model and its test metrics.
#[pyfunction]
#[pyo3(signature = (data, model, epochs = 35, batch_size = 64, lr = 5e-4, seed = 0, head_only = false))]
#[allow(clippy::too_many_arguments)]
fn finetune(
    py: Python<'_>,
    data: &PyDataset,
    model: &PyModel,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
    head_only: bool,
) -> PyResult<(PyModel, PyMetrics)> {
    let cfg = TrainConfig { epochs, batch_size, lr, seed, head_only, ..TrainConfig::finetune() };
    let init = model.inner.clone();
    let out = py
        .detach(|| training::finetune(&data.inner, &init.config, &cfg, Some(init.clone()), &mut TrainLog::disabled()))
        .map_err(py_err)?;
    Ok((PyModel { inner: out.best }, PyMetrics { inner: out.report }))
}

#[pyfunction]
#[pyo3(signature = (model, data, split = "test"))]
fn evaluate(model: &PyModel, data: &PyDataset, split: &str) -> PyResult<PyMetrics> {
    let coords = data.inner.coords(parse::<Split>("split", split)?);
    let inner = training::evaluate(&model.inner, &data.inner, coords).map_err(py_err)?;
    Ok(PyMetrics { inner })
}

#[pymodule]
fn sfmim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMetrics>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(rdft, m)?)?;
    m.add_function(wrap_pyfunction!(irdft, m)?)?;
    m.add_function(wrap_pyfunction!(frequency_filter, m)?)?;
    m.add_function(wrap_pyfunction!(mask_count, m)?)?;
    m.add_function(wrap_pyfunction!(spatial_mask, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
