use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mhrul::attention::{self, AttentionConfig, AttentionMode, ScoreKind, ScoreParams};
use mhrul::data::{self, Prepared, Subset, SyntheticConfig};
use mhrul::experiment::{ConfigFile, Overrides};
use mhrul::metrics;
use mhrul::model::{build_model, count_params, HeadMode, HeadSpec, HeadType, Model, ModelSpec};
use mhrul::train::{train, TrainConfig};
use mhrul::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        Error::State(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for mhrul::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Root-mean-square error of two equal-length sequences.
#[pyfunction]
fn rmse(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    metrics::rmse(&pred, &truth).py()
}

/// Asymmetric score with `e = pred − truth`; late predictions cost more.
#[pyfunction]
fn score(pred: Vec<f64>, truth: Vec<f64>) -> PyResult<f64> {
    metrics::score(&pred, &truth).py()
}

fn tensor_from(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Tensor::new(vec![rows.len(), cols], rows.concat()).py()
}

#[pyfunction]
#[pyo3(signature = (kind, h_t, h_s, w_a=None, v_a=None))]
fn alignment_score(
    kind: &str,
    h_t: Vec<f64>,
    h_s: Vec<f64>,
    w_a: Option<Vec<Vec<f64>>>,
    v_a: Option<Vec<f64>>,
) -> PyResult<f64> {
    let kind = ScoreKind::parse(kind).py()?;
    let w_a = match w_a {
        // a single row is the location-based weight vector
        Some(rows) if rows.len() == 1 && kind == ScoreKind::LocationBased => Some(Tensor::vector(&rows[0])),
        Some(rows) => Some(tensor_from(rows)?),
        None => None,
    };
    let params = ScoreParams {
        w_a,
        v_a: v_a.map(|v| Tensor::vector(&v)),
    };
    attention::alignment_score(kind, &h_t, &h_s, &params).py()
}

/// Softmax of a score vector.
#[pyfunction]
fn attention_weights(scores: Vec<f64>) -> PyResult<Vec<f64>> {
    if scores.is_empty() {
        return Err(PyValueError::new_err("scores must not be empty"));
    }
    Ok(attention::attention_weights(&Tensor::vector(&scores)).py()?.into_data())
}

/// `min(last_cycle − cycle, r_early)` per row; rows grouped by unit.
#[pyfunction]
#[pyo3(signature = (unit_ids, cycles, r_early=130.0))]
fn piecewise_rul(unit_ids: Vec<u32>, cycles: Vec<u32>, r_early: f64) -> PyResult<Vec<f64>> {
    if unit_ids.len() != cycles.len() {
        return Err(PyValueError::new_err("unit_ids and cycles differ in length"));
    }
    let frame = data::FeatureFrame {
        subset: Subset::Fd001,
        columns: vec!["cycle".into()],
        values: cycles.iter().map(|&c| c as f64).collect(),
        unit_ids,
        cycles,
    };
    Ok(data::piecewise_rul(&frame, r_early))
}

/// Writes a CMAPSS-format synthetic dataset to `output_dir`.
#[pyfunction]
#[pyo3(signature = (output_dir, subset="FD001", train_units=20, test_units=10, seed=7))]
fn write_synthetic(
    output_dir: PathBuf,
    subset: &str,
    train_units: usize,
    test_units: usize,
    seed: u64,
) -> PyResult<()> {
    let subset = Subset::parse(subset).py()?;
    data::synthetic_dataset(&SyntheticConfig {
        subset,
        train_units,
        test_units,
        seed,
        ..Default::default()
    })
    .write(&output_dir, subset)
    .py()
}

/// Scaled train and test windows of one subset.
#[pyclass(name = "Dataset", module = "mhrul_py")]
struct PyDataset {
    inner: Prepared,
    #[pyo3(get)]
    subset: String,
    #[pyo3(get)]
    window_length: usize,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (data_dir, subset="FD001", window_length=90, r_early=130.0))]
    fn load(data_dir: PathBuf, subset: &str, window_length: usize, r_early: f64) -> PyResult<Self> {
        let s = Subset::parse(subset).py()?;
        let (train, test, truth) = data::load_subset(&data_dir, s).py()?;
        Ok(PyDataset {
            inner: data::prepare(s, &train, &test, truth, window_length, r_early).py()?,
            subset: s.name().into(),
            window_length,
        })
    }

    #[getter]
    fn n_train(&self) -> usize {
        self.inner.train.len()
    }

    #[getter]
    fn n_test(&self) -> usize {
        self.inner.test.len()
    }

    #[getter]
    fn feature_names(&self) -> Vec<String> {
        self.inner.train_frame.columns.clone()
    }

    #[getter]
    fn train_targets(&self) -> Vec<f64> {
        self.inner.train.targets.clone()
    }

    #[getter]
    fn test_targets(&self) -> Vec<f64> {
        self.inner.test.targets.clone()
    }

    #[getter]
    fn test_unit_ids(&self) -> Vec<u32> {
        self.inner.test.unit_ids.clone()
    }

    /// Test window `i` as `window_length` rows of features.
    fn test_window(&self, i: usize) -> PyResult<Vec<Vec<f64>>> {
        let w = &self.inner.test;
        if i >= w.len() {
            return Err(PyValueError::new_err(format!("index {i} out of range")));
        }
        let f = w.n_signals();
        let row = w.seq_len() * f;
        Ok(w.windows.data()[i * row..(i + 1) * row]
            .chunks(f)
            .map(<[f64]>::to_vec)
            .collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({}, windows={}, test_units={}, features={})",
            self.subset,
            self.n_train(),
            self.n_test(),
            self.inner.train.n_signals()
        )
    }
}

#[pyclass(name = "Model", module = "mhrul_py")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (
        n_signals,
        head_type="fnn",
        mode="multi_head",
        window_length=90,
        layer_sizes=None,
        trunk_sizes=None,
        score_kind=None,
        attention_mode="soft",
        seed=0,
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        n_signals: usize,
        head_type: &str,
        mode: &str,
        window_length: usize,
        layer_sizes: Option<Vec<usize>>,
        trunk_sizes: Option<Vec<usize>>,
        score_kind: Option<&str>,
        attention_mode: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let mut head = HeadSpec::default_for(HeadType::parse(head_type).py()?);
        if let Some(ls) = layer_sizes {
            head.layer_sizes = ls;
        }
        if let Some(k) = score_kind {
            head.attention = Some(AttentionConfig::new(
                ScoreKind::parse(k).py()?,
                AttentionMode::parse(attention_mode).py()?,
            ));
        }
        let mut spec = ModelSpec::new(HeadMode::parse(mode).py()?, head, n_signals);
        spec.window_length = window_length;
        spec.seed = seed;
        if let Some(t) = trunk_sizes {
            spec.trunk_sizes = t;
        }
        Ok(PyModel {
            inner: build_model(&spec).py()?,
        })
    }

    #[getter]
    fn label(&self) -> String {
        self.inner.spec.label()
    }

    #[getter]
    fn n_heads(&self) -> usize {
        self.inner.n_heads()
    }

    fn param_count(&self) -> usize {
        count_params(&self.inner)
    }

    /// Inference on `[batch][window_length][n_signals]` nested lists.
    fn predict(&mut self, windows: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<f64>> {
        let b = windows.len();
        let t = windows.first().map_or(0, Vec::len);
        let s = windows.first().and_then(|w| w.first()).map_or(0, Vec::len);
        let flat: Vec<f64> = windows.into_iter().flatten().flatten().collect();
        if flat.len() != b * t * s {
            return Err(PyValueError::new_err("ragged input windows"));
        }
        let x = Tensor::new(vec![b, t, s], flat).py()?;
        self.inner.predict(&x, 256).py()
    }

    /// Trains on the dataset's training windows; returns per-epoch losses.
    #[pyo3(signature = (dataset, epochs=30, batch_size=128, learning_rate=1e-3, seed=0))]
    fn fit(
        &mut self,
        dataset: PyRef<'_, PyDataset>,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<Vec<f64>> {
        let cfg = TrainConfig {
            epochs,
            batch_size,
            learning_rate,
            seed,
            ..Default::default()
        };
        Ok(train(&mut self.inner, &dataset.inner.train, &cfg).py()?.losses())
    }

    /// RMSE, score and per-unit `(unit_id, true, predicted)` on the test set.
    #[pyo3(signature = (dataset, r_early=130.0))]
    fn evaluate<'py>(
        &mut self,
        py: Python<'py>,
        dataset: PyRef<'_, PyDataset>,
        r_early: f64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let r = metrics::evaluate(&mut self.inner, &dataset.inner.test, r_early).py()?;
        let d = PyDict::new(py);
        d.set_item("rmse", r.rmse)?;
        d.set_item("score", r.score)?;
        d.set_item("parameters", r.param_count)?;
        let per_unit: Vec<(u32, f64, f64)> = r
            .per_unit
            .iter()
            .map(|u| (u.unit_id, u.true_rul, u.predicted_rul))
            .collect();
        d.set_item("per_unit", per_unit)?;
        Ok(d)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: Model::load(&path).py()?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Model({}, parameters={})", self.label(), self.param_count())
    }
}

/// Runs a full experiment from an optional TOML file plus overrides.
#[pyfunction]
#[pyo3(signature = (config=None, data_dir=None, output_dir=None, subset=None, head_type=None, mode=None, epochs=None, repeats=None, seed=None))]
#[allow(clippy::too_many_arguments)]
fn run_experiment<'py>(
    py: Python<'py>,
    config: Option<PathBuf>,
    data_dir: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    subset: Option<String>,
    head_type: Option<String>,
    mode: Option<String>,
    epochs: Option<usize>,
    repeats: Option<usize>,
    seed: Option<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let file = match config {
        Some(p) => ConfigFile::load(&p).py()?,
        None => ConfigFile::default(),
    };
    let cfg = file
        .resolve(&Overrides {
            data_dir,
            output_dir,
            subset,
            head_type,
            mode,
            epochs,
            repeats,
            seed,
            ..Default::default()
        })
        .py()?;
    let r = mhrul::experiment::run_experiment(&cfg).py()?;
    let d = PyDict::new(py);
    d.set_item("label", cfg.label())?;
    d.set_item("rmse", r.reports.iter().map(|x| x.rmse).collect::<Vec<_>>())?;
    d.set_item("score", r.reports.iter().map(|x| x.score).collect::<Vec<_>>())?;
    d.set_item("parameters", r.reports[0].param_count)?;
    d.set_item("output_dir", cfg.output_dir.display().to_string())?;
    Ok(d)
}

#[pymodule]
fn mhrul_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(alignment_score, m)?)?;
    m.add_function(wrap_pyfunction!(attention_weights, m)?)?;
    m.add_function(wrap_pyfunction!(piecewise_rul, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
