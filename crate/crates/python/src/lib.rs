//! Python bindings. Matrices cross the boundary as lists of rows, reports as
//! plain dicts with the same keys as the command-line JSON.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::Serialize;

use topopack::attention::{dense_oracle_attention, sparse_attention as run_sparse};
use topopack::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use topopack::grid::{read_fgrid, write_fgrid, FeatureGrid, PackLayout, TokenKind};
use topopack::numerics::Matrix;
use topopack::roi;
use topopack::synth::{synth_grid as run_synth, SynthConfig};
use topopack::topomask::{self, mask_entry_with_validity, MaskStats, TopoMaskDescriptor};
use topopack::train::{self, run_stage, Stage, TrainConfig};
use topopack::Error;

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        e @ (Error::InvalidArgument(_)
        | Error::PadFirst { .. }
        | Error::Shape(_)
        | Error::OutOfRange(_)
        | Error::Format(_)) => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

trait OrPyErr<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> OrPyErr<T> for topopack::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

impl<T> OrPyErr<T> for std::io::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(|e| PyOSError::new_err(e.to_string()))
    }
}

/// Round-trips a report through JSON so Python sees the same dict the CLI prints.
fn to_dict<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn matrix_from_rows(rows: Vec<Vec<f64>>, what: &str) -> PyResult<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err(format!("{what}: rows have different lengths")));
    }
    let n = rows.len();
    Matrix::from_vec(n, cols, rows.into_iter().flatten().collect()).py_err()
}

fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// A height × width grid of feature vectors with a validity flag per cell.
#[pyclass(name = "FeatureGrid", module = "topopack_py")]
pub struct PyFeatureGrid {
    inner: FeatureGrid,
}

#[pymethods]
impl PyFeatureGrid {
    /// `features` is row-major, `dim` values per cell. Cells are all valid
    /// unless `valid` says otherwise.
    #[new]
    #[pyo3(signature = (height, width, dim, features, valid = None))]
    fn new(height: usize, width: usize, dim: usize, features: Vec<f64>, valid: Option<Vec<bool>>) -> PyResult<Self> {
        let valid = valid.unwrap_or_else(|| vec![true; height * width]);
        Ok(Self { inner: FeatureGrid::new(height, width, dim, features, valid).py_err()? })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        let file = File::open(&path).py_err()?;
        Ok(Self { inner: read_fgrid(BufReader::new(file)).py_err()? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        let mut out = BufWriter::new(File::create(&path).py_err()?);
        write_fgrid(&self.inner, &mut out).py_err()?;
        out.flush().py_err()
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self { inner: read_fgrid(data).py_err()? })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let mut buf = Vec::new();
        write_fgrid(&self.inner, &mut buf).py_err()?;
        Ok(PyBytes::new(py, &buf))
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn features(&self) -> Vec<f64> {
        self.inner.features().to_vec()
    }

    #[getter]
    fn validity(&self) -> Vec<bool> {
        self.inner.validity().to_vec()
    }

    fn feature(&self, i: usize, j: usize) -> PyResult<Vec<f64>> {
        if i >= self.inner.height() || j >= self.inner.width() {
            return Err(PyValueError::new_err(format!("cell ({i}, {j}) is outside the grid")));
        }
        Ok(self.inner.feature(i, j).to_vec())
    }

    fn __repr__(&self) -> String {
        let g = &self.inner;
        format!("FeatureGrid(height={}, width={}, dim={}, valid={})", g.height(), g.width(), g.dim(), g.valid_count())
    }
}

/// Token positions of a packed grid: global token, then each pack's patches
/// followed by its summary.
#[pyclass(name = "PackLayout", module = "topopack_py")]
pub struct PyPackLayout {
    inner: PackLayout,
}

#[pymethods]
impl PyPackLayout {
    #[new]
    fn new(height: usize, width: usize, k: usize) -> PyResult<Self> {
        Ok(Self { inner: PackLayout::new(height, width, k).py_err()? })
    }

    #[staticmethod]
    fn strip(packs: usize, k: usize) -> PyResult<Self> {
        Ok(Self { inner: PackLayout::strip(packs, k).py_err()? })
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    #[getter]
    fn pack_count(&self) -> usize {
        self.inner.pack_count()
    }

    #[getter]
    fn seq_len(&self) -> usize {
        self.inner.seq_len()
    }

    fn summary_indices(&self) -> Vec<usize> {
        self.inner.summary_indices()
    }

    fn coord_to_token(&self, i: usize, j: usize) -> PyResult<usize> {
        self.inner.coord_to_token(i, j).py_err()
    }

    fn token_to_coord(&self, token: usize) -> PyResult<(usize, usize)> {
        self.inner.token_to_coord(token).py_err()
    }

    /// `(kind, pack, offset)` with kind one of "global", "patch" or "summary";
    /// pack and offset are None where they do not apply.
    fn token_kind(&self, token: usize) -> PyResult<(&'static str, Option<usize>, Option<usize>)> {
        Ok(match self.inner.kind(token).py_err()? {
            TokenKind::Global => ("global", None, None),
            TokenKind::Patch { pack, offset } => ("patch", Some(pack), Some(offset)),
            TokenKind::Summary { pack } => ("summary", Some(pack), None),
        })
    }

    /// Whether `query` may attend to `key`, with padded keys given by `key_valid`.
    #[pyo3(signature = (query, key, key_valid = None))]
    fn allows(&self, query: usize, key: usize, key_valid: Option<Vec<bool>>) -> PyResult<bool> {
        let n = self.inner.seq_len();
        if query >= n || key >= n {
            return Err(PyValueError::new_err(format!("index outside a sequence of {n} tokens")));
        }
        let valid = self.validity(key_valid)?;
        Ok(mask_entry_with_validity(&self.inner, &valid, query, key))
    }

    /// Every allowed (query, key) pair.
    #[pyo3(signature = (key_valid = None))]
    fn allowed_pairs(&self, key_valid: Option<Vec<bool>>) -> PyResult<Vec<(usize, usize)>> {
        let valid = self.validity(key_valid)?;
        Ok(TopoMaskDescriptor::new(&self.inner, &valid).py_err()?.expand())
    }

    fn __repr__(&self) -> String {
        let l = &self.inner;
        format!("PackLayout(height={}, width={}, k={}, packs={})", l.height(), l.width(), l.k(), l.pack_count())
    }
}

impl PyPackLayout {
    fn validity(&self, key_valid: Option<Vec<bool>>) -> PyResult<Vec<bool>> {
        let n = self.inner.seq_len();
        let valid = key_valid.unwrap_or_else(|| vec![true; n]);
        if valid.len() != n {
            return Err(PyValueError::new_err(format!("key_valid has {} entries, sequence has {n}", valid.len())));
        }
        Ok(valid)
    }
}

/// Trained parameters plus string metadata.
#[pyclass(name = "Checkpoint", module = "topopack_py")]
pub struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Checkpoint::load(path).py_err()? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).py_err()
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self { inner: read_checkpoint(data).py_err()? })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let mut buf = Vec::new();
        write_checkpoint(&self.inner, &mut buf).py_err()?;
        Ok(PyBytes::new(py, &buf))
    }

    #[getter]
    fn meta(&self) -> std::collections::BTreeMap<String, String> {
        self.inner.meta.clone()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params.iter().map(|(_, name, _)| name.to_string()).collect()
    }

    fn param(&self, name: &str) -> PyResult<Vec<Vec<f64>>> {
        let id = self.inner.params.id(name).ok_or_else(|| PyValueError::new_err(format!("no parameter {name:?}")))?;
        Ok(matrix_to_rows(self.inner.params.get(id)))
    }

    fn __repr__(&self) -> String {
        let stage = self.inner.meta.get("stage").map_or("?", String::as_str);
        format!("Checkpoint(stage={stage}, params={})", self.inner.params.len())
    }
}

/// Allowed entries of the mask for `packs` packs of side `k`.
#[pyfunction]
fn allowed_count(packs: u64, k: u64) -> u64 {
    topomask::allowed_count(packs, k)
}

/// Sequence length for `packs` packs of side `k`.
#[pyfunction]
fn sequence_length(packs: u64, k: u64) -> u64 {
    topomask::seq_len(packs, k)
}

/// Fraction of the dense score matrix the mask keeps.
#[pyfunction]
fn sparsity_ratio(packs: u64, k: u64) -> f64 {
    topomask::sparsity_ratio(packs, k)
}

#[pyfunction]
fn mask_stats(py: Python<'_>, packs: u64, k: u64) -> PyResult<Bound<'_, PyAny>> {
    to_dict(py, &MaskStats::new(packs, k))
}

fn attention_inputs(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    layout: &PyPackLayout,
    key_valid: Option<Vec<bool>>,
) -> PyResult<(Matrix, Matrix, Matrix, Vec<bool>)> {
    let valid = layout.validity(key_valid)?;
    Ok((matrix_from_rows(q, "q")?, matrix_from_rows(k, "k")?, matrix_from_rows(v, "v")?, valid))
}

/// Masked softmax attention evaluated only on allowed entries.
#[pyfunction]
#[pyo3(signature = (q, k, v, layout, key_valid = None))]
fn sparse_attention(
    py: Python<'_>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    layout: PyRef<'_, PyPackLayout>,
    key_valid: Option<Vec<bool>>,
) -> PyResult<Vec<Vec<f64>>> {
    let (q, k, v, valid) = attention_inputs(q, k, v, &layout, key_valid)?;
    let desc = TopoMaskDescriptor::new(&layout.inner, &valid).py_err()?;
    let out = py.detach(|| run_sparse(&q, &k, &v, &desc)).py_err()?;
    Ok(matrix_to_rows(&out))
}

/// The same attention computed densely with masked entries set to -inf.
#[pyfunction]
#[pyo3(signature = (q, k, v, layout, key_valid = None))]
fn dense_attention(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    layout: PyRef<'_, PyPackLayout>,
    key_valid: Option<Vec<bool>>,
) -> PyResult<Vec<Vec<f64>>> {
    let (q, k, v, valid) = attention_inputs(q, k, v, &layout, key_valid)?;
    let l = &layout.inner;
    let out = dense_oracle_attention(&q, &k, &v, |i, j| mask_entry_with_validity(l, &valid, i, j)).py_err()?;
    Ok(matrix_to_rows(&out))
}

/// Seeded grid with planted clusters. Returns the grid and the planted
/// cluster of each cell.
#[pyfunction]
#[pyo3(signature = (seed, height = 12, width = 12, dim = 16, clusters = 3, noise = 0.1))]
fn synth_grid(
    seed: u64,
    height: usize,
    width: usize,
    dim: usize,
    clusters: usize,
    noise: f64,
) -> PyResult<(PyFeatureGrid, Vec<usize>)> {
    let s = run_synth(&SynthConfig { height, width, dim, clusters, noise, seed }).py_err()?;
    Ok((PyFeatureGrid { inner: s.grid }, s.labels))
}

/// Region proposal report: `regions`, `centroids` and `seeds`.
#[pyfunction]
#[pyo3(signature = (grid, target = 3))]
fn propose_regions<'py>(py: Python<'py>, grid: PyRef<'py, PyFeatureGrid>, target: usize) -> PyResult<Bound<'py, PyAny>> {
    let report = roi::propose_regions(&grid.inner, target).py_err()?;
    to_dict(py, &report)
}

#[pyfunction]
fn adjusted_rand_index(a: Vec<usize>, b: Vec<usize>) -> PyResult<f64> {
    roi::adjusted_rand_index(&a, &b).py_err()
}

/// Runs one training stage and returns its summary and checkpoint.
/// Options left as None keep the stage defaults.
#[pyfunction]
#[pyo3(signature = (
    stage, corpus, seed, steps = 500, k = 3, resume = None, lr = None, sgd_momentum = 0.0,
    ratio = 0.5, temperature = 0.07, ema = 0.99, noise = 0.1, queue = 1024, queries = 32, include_global = true
))]
#[allow(clippy::too_many_arguments)]
fn train_stage<'py>(
    py: Python<'py>,
    stage: &str,
    corpus: Vec<PyRef<'py, PyFeatureGrid>>,
    seed: u64,
    steps: usize,
    k: usize,
    resume: Option<PyRef<'py, PyCheckpoint>>,
    lr: Option<f64>,
    sgd_momentum: f64,
    ratio: f64,
    temperature: f64,
    ema: f64,
    noise: f64,
    queue: usize,
    queries: usize,
    include_global: bool,
) -> PyResult<(Bound<'py, PyAny>, PyCheckpoint)> {
    let stage = stage.parse::<Stage>().py_err()?;
    let grids: Vec<FeatureGrid> = corpus.iter().map(|g| g.inner.clone()).collect();
    let dim = grids.first().map_or(0, FeatureGrid::dim);
    let resume = resume.map(|r| r.inner.clone());
    let mut cfg = TrainConfig::new(stage, dim, k, seed);
    if let Some(ck) = &resume {
        cfg.encoder = train::encoder_config_from_meta(ck).py_err()?;
    }
    cfg.steps = steps;
    cfg.lr = lr.unwrap_or(cfg.lr);
    cfg.sgd_momentum = sgd_momentum;
    cfg.ratio = ratio;
    cfg.temperature = temperature;
    cfg.ema = ema;
    cfg.noise = noise;
    cfg.queue = queue;
    cfg.queries = queries;
    cfg.include_global = include_global;

    let outcome = py.detach(|| run_stage(&grids, &cfg, resume.as_ref())).py_err()?;
    let summary = serde_json::json!({
        "stage": stage.name(),
        "seed": seed,
        "steps": cfg.steps,
        "lr": cfg.lr,
        "initial_loss": outcome.initial_loss,
        "final_loss": outcome.final_loss,
        "improved": outcome.improved(),
        "log": outcome.logs,
    });
    Ok((to_dict(py, &summary)?, PyCheckpoint { inner: outcome.checkpoint }))
}

/// Encodes `grid` and condenses it to `queries` tokens with the checkpoint's
/// encoder and connector, or fresh ones seeded by `seed`.
#[pyfunction]
#[pyo3(signature = (grid, checkpoint = None, k = 3, queries = 32, include_global = true, seed = 0))]
fn condense<'py>(
    py: Python<'py>,
    grid: PyRef<'py, PyFeatureGrid>,
    checkpoint: Option<PyRef<'py, PyCheckpoint>>,
    k: usize,
    queries: usize,
    include_global: bool,
    seed: u64,
) -> PyResult<Vec<Vec<f64>>> {
    let ck = checkpoint.as_ref().map(|c| &c.inner);
    let g = &grid.inner;
    let (_, tokens) = py.detach(|| train::condense_grid(g, ck, k, queries, include_global, seed)).py_err()?;
    Ok(matrix_to_rows(&tokens))
}

#[pymodule]
fn topopack_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFeatureGrid>()?;
    m.add_class::<PyPackLayout>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(allowed_count, m)?)?;
    m.add_function(wrap_pyfunction!(sequence_length, m)?)?;
    m.add_function(wrap_pyfunction!(sparsity_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(mask_stats, m)?)?;
    m.add_function(wrap_pyfunction!(sparse_attention, m)?)?;
    m.add_function(wrap_pyfunction!(dense_attention, m)?)?;
    m.add_function(wrap_pyfunction!(synth_grid, m)?)?;
    m.add_function(wrap_pyfunction!(propose_regions, m)?)?;
    m.add_function(wrap_pyfunction!(adjusted_rand_index, m)?)?;
    m.add_function(wrap_pyfunction!(train_stage, m)?)?;
    m.add_function(wrap_pyfunction!(condense, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests;
