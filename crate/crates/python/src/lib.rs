//! Python bindings: encoders, CTC, parameter and FLOP accounting, toy
//! training and the verification suites.

use std::collections::HashMap;

use hyperconformer::configs::{self, EncoderConfig, ModelKind, Preset, Scope};
use hyperconformer::conformer::{encoder_forward, subsampled_len as subsampled, EncoderParams, FEATURE_DIM};
use hyperconformer::ctc::{self, CtcBatch};
use hyperconformer::harness::{self, ToyTask, ToyTaskKind, TrainOptions};
use hyperconformer::{backward, no_grad, verify, Error, Module};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(py_err)
}

fn rows_to_tensor(rows: Vec<Vec<f64>>, leaf: bool) -> PyResult<hyperconformer::Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    let shape = [rows.len(), cols];
    let data = rows.concat();
    let t = if leaf {
        hyperconformer::Tensor::leaf(&shape, data)
    } else {
        hyperconformer::Tensor::from_vec(&shape, data)
    };
    t.map_err(py_err)
}

fn tensor_to_rows(t: &[f64], cols: usize) -> Vec<Vec<f64>> {
    t.chunks(cols.max(1)).map(<[f64]>::to_vec).collect()
}

/// A 2-D matrix of 64-bit floats.
#[pyclass(name = "Tensor", frozen)]
struct PyTensor(hyperconformer::Tensor);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        rows_to_tensor(rows, false).map(PyTensor)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    fn tolist(&self) -> Vec<Vec<f64>> {
        tensor_to_rows(self.0.data(), self.0.cols())
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

/// A seeded encoder: frontend, blocks and final norm.
#[pyclass(name = "Encoder", frozen)]
struct PyEncoder {
    cfg: EncoderConfig,
    params: EncoderParams,
}

#[pymethods]
impl PyEncoder {
    /// Preset encoder; `heads` overrides the head count.
    #[new]
    #[pyo3(signature = (model, preset = "small", seed = 0, heads = None))]
    fn new(model: &str, preset: &str, seed: u64, heads: Option<usize>) -> PyResult<Self> {
        let mut cfg = EncoderConfig::preset(parse(preset)?, parse(model)?);
        if let Some(k) = heads {
            cfg = cfg.with_heads(k);
        }
        Self::build(cfg, seed)
    }

    /// Desk-scale encoder.
    #[staticmethod]
    #[pyo3(signature = (model, d_model = 16, layers = 2, heads = 2, kernel = 3, seed = 0))]
    fn toy(model: &str, d_model: usize, layers: usize, heads: usize, kernel: usize, seed: u64) -> PyResult<Self> {
        Self::build(EncoderConfig::toy(parse(model)?, d_model, layers, heads, kernel), seed)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.params.num_params()
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    /// `T×80` features to `N×d` encodings.
    fn forward(&self, features: Vec<Vec<f64>>) -> PyResult<PyTensor> {
        let x = rows_to_tensor(features, false)?;
        if x.cols() != FEATURE_DIM {
            return Err(PyValueError::new_err(format!("expected {FEATURE_DIM} features per frame, got {}", x.cols())));
        }
        no_grad(|| encoder_forward(&x, &self.params)).map(PyTensor).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Encoder(d_model={}, layers={}, heads={}, gi={})", self.cfg.d_model, self.cfg.n_layers, self.cfg.heads, self.cfg.gi_kind)
    }
}

impl PyEncoder {
    fn build(cfg: EncoderConfig, seed: u64) -> PyResult<Self> {
        let params = EncoderParams::new(&cfg, seed).map_err(py_err)?;
        Ok(PyEncoder { cfg, params })
    }
}

/// CTC negative log-likelihood and its gradient with respect to the
/// per-frame log-probabilities (blank is class 0).
#[pyfunction]
fn ctc_loss(log_probs: Vec<Vec<f64>>, targets: Vec<usize>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let lp = rows_to_tensor(log_probs, true)?;
    let batch = CtcBatch::new(lp.clone(), targets).map_err(py_err)?;
    let loss = ctc::ctc_loss(&batch).map_err(py_err)?;
    backward(&loss).map_err(py_err)?;
    let grad = lp.grad().unwrap_or_else(|| vec![0.0; lp.numel()]);
    Ok((loss.item(), tensor_to_rows(&grad, lp.cols())))
}

/// Best-path decoding: argmax per frame, merge repeats, drop blanks.
#[pyfunction]
fn greedy_decode(log_probs: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
    Ok(ctc::greedy_decode(&rows_to_tensor(log_probs, false)?))
}

/// Encoder output length for `frames` input frames.
#[pyfunction]
fn subsampled_len(frames: usize) -> usize {
    subsampled(frames)
}

#[pyfunction]
#[pyo3(signature = (model, preset = "small", scope = "full", heads = None, tied_hypernets = false))]
fn count_params(
    model: &str,
    preset: &str,
    scope: &str,
    heads: Option<usize>,
    tied_hypernets: bool,
) -> PyResult<HashMap<&'static str, usize>> {
    let mut cfg = EncoderConfig::preset(parse(preset)?, parse(model)?);
    cfg.tied_hypernets = tied_hypernets;
    if let Some(k) = heads {
        cfg = cfg.with_heads(k);
    }
    let c = configs::count_params(&cfg, parse::<Scope>(scope)?).map_err(py_err)?;
    Ok(HashMap::from([
        ("encoder", c.encoder),
        ("decoder", c.decoder),
        ("embedding", c.embedding),
        ("ctc_head", c.ctc_head),
        ("total", c.total),
    ]))
}

/// Full-model parameter reduction in percent from one head to the preset's.
#[pyfunction]
#[pyo3(signature = (preset = "small", tied_hypernets = false))]
fn head_reduction(preset: &str, tied_hypernets: bool) -> PyResult<f64> {
    let cfg = EncoderConfig {
        tied_hypernets,
        ..EncoderConfig::preset(parse::<Preset>(preset)?, ModelKind::HyperConformer)
    };
    configs::head_reduction(&cfg).map_err(py_err)
}

/// Closed-form FLOPs of one encoder pass over `frames` input frames.
#[pyfunction]
#[pyo3(signature = (model, frames, preset = "small"))]
fn flop_model(model: &str, frames: usize, preset: &str) -> PyResult<HashMap<&'static str, u64>> {
    let f = configs::flop_model(&EncoderConfig::preset(parse(preset)?, parse(model)?), frames);
    Ok(HashMap::from([
        ("frontend", f.frontend),
        ("ffn", f.ffn),
        ("gi", f.gi),
        ("conv", f.conv),
        ("other", f.other),
        ("total", f.total()),
    ]))
}

/// Trains a toy model and returns held-out frame accuracy per epoch.
#[pyfunction]
#[pyo3(signature = (task, model, epochs = 20, seed = 0, d_model = 32, layers = 2, heads = 2, kernel = 7))]
#[allow(clippy::too_many_arguments)]
fn train_toy(
    py: Python<'_>,
    task: &str,
    model: &str,
    epochs: usize,
    seed: u64,
    d_model: usize,
    layers: usize,
    heads: usize,
    kernel: usize,
) -> PyResult<Vec<f64>> {
    let task = ToyTask::standard(parse::<ToyTaskKind>(task)?, seed);
    let cfg = EncoderConfig::toy(parse(model)?, d_model, layers, heads, kernel);
    let opts = TrainOptions { epochs, seed, ..Default::default() };
    let report = py.detach(|| harness::train_toy(&task, &cfg, &opts)).map_err(py_err)?;
    Ok(report.accuracy)
}

/// Worst central-difference relative error of one module over three shapes.
#[pyfunction]
#[pyo3(signature = (module, seed = 0))]
fn gradcheck(py: Python<'_>, module: &str, seed: u64) -> PyResult<f64> {
    py.detach(|| verify::gradcheck_module(module, seed)).map(|r| r.max_rel_error).map_err(py_err)
}

/// Runs every oracle suite; returns `(all_passed, {suite: max_error})`.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn run_verify(py: Python<'_>, seed: u64) -> PyResult<(bool, HashMap<String, f64>)> {
    let report = py.detach(|| verify::run_all(seed)).map_err(py_err)?;
    Ok((report.passed, report.suites.into_iter().map(|s| (s.name, s.max_error)).collect()))
}

#[pymodule]
fn hyperconformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyEncoder>()?;
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_decode, m)?)?;
    m.add_function(wrap_pyfunction!(subsampled_len, m)?)?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(head_reduction, m)?)?;
    m.add_function(wrap_pyfunction!(flop_model, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run_verify, m)?)?;
    m.add("FEATURE_DIM", FEATURE_DIM)?;
    Ok(())
}
