//! Python module `sparsifiner`.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use sparsifiner_core::flops::{dense_mhsa_flops, linformer_mhsa_flops, sparsifiner_mhsa_flops_with};
use sparsifiner_core::sparse_mhsa::sparsifiner_head_qkv;
use sparsifiner_core::vit::Image;
use sparsifiner_core::{
    AttentionMode, CsrMatrix, DenseMatrix, Error, FlopAccounting, ModelConfig, PredictorParams, SparsifinerOptions,
};

fn to_py(e: Error) -> PyErr {
    if e.is_format_error() {
        PyIOError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DenseMatrix> {
    DenseMatrix::from_rows(&rows).map_err(to_py)
}

fn parse_mode(mode: &str) -> PyResult<AttentionMode> {
    match mode {
        "dense" => Ok(AttentionMode::Dense),
        "sparsifiner" => Ok(AttentionMode::sparsifiner()),
        "linformer" => Ok(AttentionMode::Linformer),
        other => Err(PyValueError::new_err(format!(
            "unknown mode {other:?}; expected dense, sparsifiner or linformer"
        ))),
    }
}

/// A vision transformer with dense, sparse and Linformer attention paths.
#[pyclass(name = "Model", module = "sparsifiner")]
struct PyModel {
    inner: sparsifiner_core::Model,
}

#[pymethods]
impl PyModel {
    /// Seeded random model. `config` is `"tiny"`, `"deit-small"`, or a JSON
    /// object with every configuration field.
    #[staticmethod]
    #[pyo3(signature = (config = "tiny", seed = 0))]
    fn random(config: &str, seed: u64) -> PyResult<Self> {
        let cfg = match config {
            "tiny" => ModelConfig::tiny(),
            "deit-small" => ModelConfig::deit_small(),
            json => serde_json::from_str(json).map_err(|e| PyValueError::new_err(format!("config: {e}")))?,
        };
        Ok(Self {
            inner: sparsifiner_core::Model::random(cfg, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: sparsifiner_core::Model::load(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[getter]
    fn n_tokens(&self) -> usize {
        self.inner.n_tokens()
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.config.image_size
    }

    #[getter]
    fn budget(&self) -> usize {
        self.inner.config.predictor.budget
    }

    /// Configuration as a JSON string.
    fn config_json(&self) -> String {
        serde_json::to_string(&self.inner.config).expect("config serializes")
    }

    fn with_budget(&self, budget: usize) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_budget(budget).map_err(to_py)?,
        })
    }

    /// Class scores for a channel-last RGB image given as a flat list of
    /// `size * size * 3` values.
    #[pyo3(signature = (pixels, mode = "dense"))]
    fn classify(&self, pixels: Vec<f64>, mode: &str) -> PyResult<Vec<f64>> {
        let s = self.inner.config.image_size;
        let image = Image::new(s, s, pixels).map_err(to_py)?;
        Ok(self.inner.forward(&image, parse_mode(mode)?).map_err(to_py)?.scores)
    }

    /// Masked query/key MACs summed over heads, one entry per layer.
    fn measured_macs(&self, pixels: Vec<f64>) -> PyResult<Vec<u64>> {
        let s = self.inner.config.image_size;
        let image = Image::new(s, s, pixels).map_err(to_py)?;
        let out = self.inner.forward(&image, AttentionMode::sparsifiner()).map_err(to_py)?;
        Ok(out
            .layers
            .iter()
            .map(|l| l.stats.iter().map(|h| h.qk_macs).sum())
            .collect())
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(tokens={}, d_model={}, heads={}, layers={}, budget={})",
            c.n_tokens(),
            c.d_model,
            c.n_heads,
            c.n_layers,
            c.predictor.budget
        )
    }
}

/// Dense MHSA cost in MFLOPs.
#[pyfunction(name = "dense_mhsa_flops")]
fn py_dense_flops(n: usize, d_model: usize, n_layers: usize) -> f64 {
    dense_mhsa_flops(n, d_model, n_layers).mflops()
}

/// Sparse MHSA cost in MFLOPs, predictor included.
#[pyfunction(name = "sparsifiner_mhsa_flops")]
#[pyo3(signature = (n, d_model, n_down, budget, n_layers, dense_cls_row = false))]
fn py_sparse_flops(
    n: usize,
    d_model: usize,
    n_down: usize,
    budget: usize,
    n_layers: usize,
    dense_cls_row: bool,
) -> PyResult<f64> {
    let acc = if dense_cls_row {
        FlopAccounting::DenseClsRow
    } else {
        FlopAccounting::Uniform
    };
    Ok(sparsifiner_mhsa_flops_with(n, d_model, n_down, budget, n_layers, acc)
        .map_err(to_py)?
        .mflops())
}

#[pyfunction(name = "linformer_mhsa_flops")]
fn py_linformer_flops(n: usize, d_model: usize, k: usize, n_layers: usize) -> f64 {
    linformer_mhsa_flops(n, d_model, k, n_layers).mflops()
}

#[pyfunction]
fn budget_from_keep_rate(keep_rate: f64, n: usize) -> PyResult<usize> {
    sparsifiner_core::predictor::budget_from_keep_rate(keep_rate, n).map_err(to_py)
}

/// Sparse attention for one head. Matrices are lists of rows. Returns a
/// dict with `out` (n × d_v), `mask` (column indices per query) and
/// `attention` (weights aligned with `mask`).
#[pyfunction]
#[pyo3(signature = (q, k, v, w_down, w_up, tau = 0.05, budget = 1))]
#[allow(clippy::too_many_arguments)]
fn sparse_attention_head<'py>(
    py: Python<'py>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    w_down: Vec<Vec<f64>>,
    w_up: Vec<Vec<f64>>,
    tau: f64,
    budget: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let w_up = CsrMatrix::from_dense(&matrix(w_up)?);
    let pred = PredictorParams::new(matrix(w_down)?, w_up, tau, budget).map_err(to_py)?;
    let h = sparsifiner_head_qkv(&matrix(q)?, &matrix(k)?, &matrix(v)?, &pred, SparsifinerOptions::default())
        .map_err(to_py)?;
    let n = h.mask.n();
    let mask: Vec<Vec<usize>> = (0..n).map(|i| h.mask.row_indices(i).to_vec()).collect();
    let attn: Vec<Vec<f64>> = (0..n).map(|i| h.attn.csr().row(i).values.to_vec()).collect();
    let d = PyDict::new(py);
    d.set_item("out", h.out.to_rows())?;
    d.set_item("mask", mask)?;
    d.set_item("attention", attn)?;
    Ok(d)
}

#[pymodule]
fn sparsifiner(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(py_dense_flops, m)?)?;
    m.add_function(wrap_pyfunction!(py_sparse_flops, m)?)?;
    m.add_function(wrap_pyfunction!(py_linformer_flops, m)?)?;
    m.add_function(wrap_pyfunction!(budget_from_keep_rate, m)?)?;
    m.add_function(wrap_pyfunction!(sparse_attention_head, m)?)?;
    Ok(())
}
