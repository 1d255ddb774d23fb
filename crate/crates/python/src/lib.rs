//! Python bindings: configuration, data loading, training, evaluation and
//! the numerical checks. Tensors cross the boundary as flat lists plus a
//! shape.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict};

use dtrformer::data::{build_adjacency as build, Dataset, Edge, GraphPair, Split};
use dtrformer::metrics::{MetricReport, Metrics, MAPE_FLOOR};
use dtrformer::model::{small_config, Ablations, CheckInstance};
use dtrformer::train::{
    hi_evaluate, load_inputs, synth_generate, train_and_evaluate as run, EpochLog, RunSummary, SynthConfig,
    TrainConfig, Trainer, CONFIG_KEYS,
};
use dtrformer::{Error, Tensor};

fn py<T>(r: dtrformer::Result<T>) -> PyResult<T> {
    r.map_err(|e| match e {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    })
}

fn split(name: &str) -> PyResult<Split> {
    Split::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown split `{name}`")))
}

fn metrics_dict<'py>(py: Python<'py>, m: &Metrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mae", m.mae)?;
    d.set_item("rmse", m.rmse)?;
    d.set_item("mape", m.mape)?;
    d.set_item("nse", m.nse)?;
    d.set_item("count", m.count)?;
    Ok(d)
}

fn report_dict<'py>(py: Python<'py>, r: &MetricReport) -> PyResult<Bound<'py, PyDict>> {
    let d = metrics_dict(py, &r.all)?;
    let h = PyDict::new(py);
    for (step, m) in &r.horizons {
        h.set_item(step, metrics_dict(py, m)?)?;
    }
    d.set_item("horizons", h)?;
    Ok(d)
}

fn log_dicts<'py>(py: Python<'py>, log: &[EpochLog]) -> PyResult<Vec<Bound<'py, PyDict>>> {
    log.iter()
        .map(|e| {
            let d = PyDict::new(py);
            d.set_item("epoch", e.epoch)?;
            d.set_item("train_mae", e.train_mae)?;
            d.set_item("val_mae", e.val_mae)?;
            d.set_item("seconds", e.seconds)?;
            Ok(d)
        })
        .collect()
}

fn summary_dict<'py>(py: Python<'py>, s: &RunSummary) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("val", report_dict(py, &s.val)?)?;
    d.set_item("test", report_dict(py, &s.test)?)?;
    d.set_item("hi_test", report_dict(py, &s.baseline)?)?;
    d.set_item("best_epoch", s.report.best_epoch)?;
    d.set_item("best_val_mae", s.report.best_val_mae)?;
    d.set_item("stopped_early", s.report.stopped_early)?;
    d.set_item("log", log_dicts(py, &s.report.log)?)?;
    Ok(d)
}

type Rows = Vec<Vec<f64>>;

fn rows(t: &Tensor<f64>) -> Rows {
    let n = t.shape()[1];
    t.data().chunks(n).map(<[f64]>::to_vec).collect()
}

fn rows32(t: &Tensor<f32>) -> Rows {
    rows(&t.cast())
}

/// Training and model settings; keyword arguments go through `set`.
#[pyclass(name = "TrainConfig", module = "dtrformer_py", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut c = Self {
            inner: TrainConfig::default(),
        };
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                c.set(&k.extract::<String>()?, &v)?;
            }
        }
        Ok(c)
    }

    /// Parses the `key = value` text a run directory stores.
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: py(TrainConfig::parse(text))?,
        })
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let text = if value.is_instance_of::<PyBool>() {
            value.extract::<bool>()?.to_string()
        } else {
            value.str()?.to_string()
        };
        py(self.inner.set(key, &text))
    }

    fn get(&self, key: &str) -> PyResult<String> {
        let text = self.inner.to_text();
        text.lines()
            .filter_map(|l| l.split_once(" = "))
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.to_string())
            .ok_or_else(|| PyValueError::new_err(format!("unknown key `{key}`")))
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        CONFIG_KEYS.to_vec()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainConfig(lr={}, batch_size={}, seed={})",
            self.inner.lr, self.inner.batch_size, self.inner.seed
        )
    }
}

/// A normalized series with its windows and transition matrices.
#[pyclass(name = "Dataset", module = "dtrformer_py", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    dataset: Dataset,
    graphs: GraphPair,
}

#[pymethods]
impl PyDataset {
    /// Loads a series (binary or `t,n,c,value` CSV) and a `from,to,distance` file.
    #[new]
    fn new(data: PathBuf, distances: PathBuf, config: &PyTrainConfig) -> PyResult<Self> {
        let (dataset, graphs) = py(load_inputs(&data, &distances, &config.inner))?;
        Ok(Self { dataset, graphs })
    }

    #[getter]
    fn nodes(&self) -> usize {
        self.dataset.nodes()
    }

    #[getter]
    fn channels(&self) -> usize {
        self.dataset.channels()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.dataset.series.steps()
    }

    /// `(mean, std)` per channel, fitted on the training segment.
    #[getter]
    fn stats(&self) -> (Vec<f64>, Vec<f64>) {
        (self.dataset.stats.mean.clone(), self.dataset.stats.std.clone())
    }

    /// Start offsets of the split's windows in the raw series.
    fn windows(&self, name: &str) -> PyResult<Vec<usize>> {
        Ok(self.dataset.window_starts(split(name)?).to_vec())
    }

    #[getter]
    fn forward_transition(&self) -> Vec<Vec<f64>> {
        rows32(&self.graphs.a_fwd)
    }

    #[getter]
    fn backward_transition(&self) -> Vec<Vec<f64>> {
        rows32(&self.graphs.a_bwd)
    }

    /// Persistence-baseline metrics on a split.
    fn historical_inertia<'py>(&self, py_: Python<'py>, name: &str) -> PyResult<Bound<'py, PyDict>> {
        let r = py(hi_evaluate(&self.dataset, split(name)?))?;
        report_dict(py_, &r)
    }
}

/// A model with its optimizer state.
#[pyclass(name = "Trainer", module = "dtrformer_py")]
struct PyTrainer {
    trainer: Trainer,
    data: PyDataset,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: &PyTrainConfig, dataset: &PyDataset) -> PyResult<Self> {
        let trainer = py(Trainer::new(
            config.inner.clone(),
            &dataset.dataset,
            dataset.graphs.clone(),
        ))?;
        Ok(Self {
            trainer,
            data: dataset.clone(),
        })
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.trainer.epoch()
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.trainer.model.params.numel()
    }

    /// One pass over the training windows; returns the mean batch loss.
    fn run_epoch(&mut self, py_: Python<'_>) -> PyResult<f64> {
        let Self { trainer, data } = self;
        py(py_.detach(|| trainer.run_epoch(&data.dataset)))
    }

    /// Trains with early stopping and returns the epoch log.
    #[pyo3(signature = (out_dir=None))]
    fn fit<'py>(&mut self, py_: Python<'py>, out_dir: Option<PathBuf>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let Self { trainer, data } = self;
        let report = py(py_.detach(|| trainer.fit(&data.dataset, out_dir.as_deref())))?;
        log_dicts(py_, &report.log)
    }

    fn evaluate<'py>(&self, py_: Python<'py>, name: &str) -> PyResult<Bound<'py, PyDict>> {
        let r = py(self.trainer.evaluate(&self.data.dataset, split(name)?))?;
        report_dict(py_, &r)
    }

    /// `(predictions, targets, shape)` in original units; the lists are
    /// row-major over `(windows, steps, nodes, channels)`.
    fn predict(&self, name: &str) -> PyResult<(Vec<f32>, Vec<f32>, Vec<usize>)> {
        let (p, t) = py(self.trainer.predict_split(&self.data.dataset, split(name)?))?;
        let shape = p.shape().to_vec();
        Ok((p.into_data(), t.into_data(), shape))
    }

    /// Parameter names and shapes in storage order.
    fn parameters(&self) -> Vec<(String, Vec<usize>)> {
        self.trainer
            .model
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect()
    }
}

/// Writes a seeded synthetic dataset; returns `(series_path, distances_path)`.
#[pyfunction]
#[pyo3(signature = (out_dir, nodes=16, days=14, seed=0, noise=5.0))]
fn synth(out_dir: PathBuf, nodes: usize, days: usize, seed: u64, noise: f64) -> PyResult<(PathBuf, PathBuf)> {
    let data = py(synth_generate(&SynthConfig {
        nodes,
        days,
        seed,
        noise,
        ..SynthConfig::default()
    }))?;
    py(data.write(&out_dir))
}

/// Gaussian-kernel adjacency from `(from, to, distance)` triples.
#[pyfunction]
#[pyo3(signature = (edges, nodes, sigma=None, theta=0.1))]
fn build_adjacency(
    edges: Vec<(usize, usize, f64)>,
    nodes: usize,
    sigma: Option<f64>,
    theta: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let edges: Vec<Edge> = edges
        .into_iter()
        .map(|(from, to, distance)| Edge { from, to, distance })
        .collect();
    Ok(rows(&py(build(&edges, nodes, sigma, theta))?))
}

/// Row-normalized forward and backward transition matrices of an adjacency.
#[pyfunction]
fn transition_matrices(adjacency: Vec<Vec<f64>>) -> PyResult<(Rows, Rows)> {
    let n = adjacency.len();
    if adjacency.iter().any(|r| r.len() != n) {
        return Err(PyValueError::new_err("adjacency must be square"));
    }
    let a = py(Tensor::new(vec![n, n], adjacency.concat()))?;
    let pair = py(GraphPair::from_adjacency(&a))?;
    Ok((rows32(&pair.a_fwd), rows32(&pair.a_bwd)))
}

/// MAE, RMSE, MAPE (percent, targets above `mape_floor`) and NSE.
#[pyfunction]
#[pyo3(signature = (prediction, target, mape_floor=MAPE_FLOOR))]
fn metrics<'py>(
    py_: Python<'py>,
    prediction: Vec<f64>,
    target: Vec<f64>,
    mape_floor: f64,
) -> PyResult<Bound<'py, PyDict>> {
    if prediction.len() != target.len() {
        return Err(PyValueError::new_err(format!(
            "{} predictions against {} targets",
            prediction.len(),
            target.len()
        )));
    }
    let m = py(Metrics::compute(prediction, target, mape_floor))?;
    metrics_dict(py_, &m)
}

/// Trains, restores the best checkpoint and scores validation, test and
/// the persistence baseline. Returns `(trainer, summary)`.
#[pyfunction]
#[pyo3(signature = (config, dataset, out_dir=None))]
fn train_and_evaluate<'py>(
    py_: Python<'py>,
    config: &PyTrainConfig,
    dataset: &PyDataset,
    out_dir: Option<PathBuf>,
) -> PyResult<(PyTrainer, Bound<'py, PyDict>)> {
    let (trainer, summary) = py(py_.detach(|| {
        run(
            config.inner.clone(),
            &dataset.dataset,
            dataset.graphs.clone(),
            out_dir.as_deref(),
            |_| {},
        )
    }))?;
    let d = summary_dict(py_, &summary)?;
    Ok((
        PyTrainer {
            trainer,
            data: dataset.clone(),
        },
        d,
    ))
}

/// Worst relative error of the composed-loss gradient against central
/// differences on `count` random parameters of a small 64-bit model.
#[pyfunction]
#[pyo3(signature = (count=50, seed=0, eps=1e-5))]
fn gradcheck(count: usize, seed: u64, eps: f64) -> PyResult<f64> {
    let inst = py(CheckInstance::new(small_config(), 2, seed))?;
    Ok(py(inst.grad_check(count, seed, eps))?.max_relative_error)
}

#[pymodule]
pub fn dtrformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(build_adjacency, m)?)?;
    m.add_function(wrap_pyfunction!(transition_matrices, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(train_and_evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("VARIANTS", Ablations::VARIANTS.to_vec())?;
    m.add("MAPE_FLOOR", MAPE_FLOOR)?;
    Ok(())
}
