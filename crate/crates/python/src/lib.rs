//! Python bindings for `optbp`.

use std::path::PathBuf;
use std::sync::Arc;

use optbp::analysis::{self, SimilarityConfig, TargetError};
use optbp::data::{self, DatasetName, Part};
use optbp::network::{load_checkpoint, save_checkpoint, validate_pooling, default_pooling};
use optbp::trainer::{self, InitScheme, TrainConfig, TrainOptions};
use optbp::{Architecture, DerivativeMode, DerivativeTable, Error, Kind, LossKind, NonlinearitySpec, PoolMode, Rng, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Parse { .. } | Error::MissingDataset { .. } | Error::HashMismatch { .. } | Error::Download(_) | Error::Csv(_) => {
            PyIOError::new_err(e.to_string())
        }
        Error::Validation { .. } | Error::Dimension(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr>(s: &str, what: &str) -> PyResult<T> {
    s.parse().map_err(|_| PyValueError::new_err(format!("unknown {what} {s:?}")))
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Tensor<f32>> {
    Tensor::new(shape, data.into_iter().map(|v| v as f32).collect()).map_err(err)
}

fn derivative_mode(name: &str, table: Option<&Table>) -> PyResult<DerivativeMode> {
    match (name, table) {
        ("exact", None) => Ok(DerivativeMode::Exact),
        ("optical", None) => Ok(DerivativeMode::OpticalApprox),
        ("tabulated", Some(t)) => Ok(DerivativeMode::Tabulated(t.inner.clone())),
        ("tabulated", None) => Err(PyValueError::new_err("tabulated derivative needs a table")),
        (_, Some(_)) => Err(PyValueError::new_err("table given for a non-tabulated derivative")),
        _ => Err(PyValueError::new_err(format!("unknown derivative mode {name:?}"))),
    }
}

/// Piecewise-cubic derivative table.
#[pyclass(frozen, from_py_object, module = "optbp")]
#[derive(Clone)]
struct Table {
    inner: Arc<DerivativeTable>,
}

#[pymethods]
impl Table {
    #[new]
    fn new(grid: Vec<f64>, values: Vec<f64>) -> PyResult<Self> {
        Ok(Self { inner: Arc::new(DerivativeTable::new(grid, values).map_err(err)?) })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Arc::new(DerivativeTable::load(&path).map_err(err)?) })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn grid(&self) -> Vec<f64> {
        self.inner.grid().to_vec()
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    fn __call__(&self, z: f64) -> f64 {
        self.inner.eval(z)
    }

    fn __repr__(&self) -> String {
        format!("Table(knots={}, z_max={})", self.inner.grid().len(), self.inner.z_max())
    }
}

/// Activation with its backward rule.
#[pyclass(frozen, from_py_object, module = "optbp")]
#[derive(Clone)]
struct Nonlinearity {
    inner: NonlinearitySpec,
}

#[pymethods]
impl Nonlinearity {
    #[new]
    #[pyo3(signature = (kind, depth = 0.0, deriv = "exact", table = None))]
    fn new(kind: &str, depth: f64, deriv: &str, table: Option<Table>) -> PyResult<Self> {
        let kind: Kind = parse(kind, "nonlinearity")?;
        let mode = derivative_mode(deriv, table.as_ref())?;
        Ok(Self { inner: NonlinearitySpec::new(kind, depth, mode).map_err(err)? })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().name()
    }

    #[getter]
    fn depth(&self) -> f64 {
        self.inner.depth()
    }

    #[getter]
    fn deriv(&self) -> &'static str {
        self.inner.derivative().name()
    }

    fn forward(&self, z: f64) -> f64 {
        self.inner.forward(z)
    }

    fn exact_derivative(&self, z: f64) -> f64 {
        self.inner.exact_derivative(z)
    }

    /// Factor applied to the error signal in the backward pass.
    fn backward(&self, z: f64) -> f64 {
        self.inner.backward_response(z)
    }

    fn __repr__(&self) -> String {
        format!("Nonlinearity({:?}, depth={}, deriv={:?})", self.kind(), self.depth(), self.deriv())
    }
}

/// Handwritten-character dataset with its validation/test split.
#[pyclass(module = "optbp")]
struct Dataset {
    inner: data::Dataset,
    split: data::Split,
}

fn part(name: &str) -> PyResult<(Part, bool)> {
    match name {
        "train" => Ok((Part::Train, false)),
        "validation" => Ok((Part::Test, true)),
        "test" => Ok((Part::Test, false)),
        _ => Err(PyValueError::new_err(format!("unknown part {name:?}"))),
    }
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    #[pyo3(signature = (name = "mnist", data_dir = None, split_seed = 0))]
    fn load(name: &str, data_dir: Option<PathBuf>, split_seed: u64) -> PyResult<Self> {
        let name: DatasetName = parse(name, "dataset")?;
        let dir = data_dir.unwrap_or_else(data::default_data_dir);
        let inner = data::Dataset::load(name, &dir).map_err(err)?;
        let split = inner.split(split_seed).map_err(err)?;
        Ok(Self { inner, split })
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    /// Sizes of the train, validation and test parts.
    fn sizes(&self) -> (usize, usize, usize) {
        (self.split.train.len(), self.split.validation.len(), self.split.test.len())
    }

    /// Keeps only the first `n` training samples in split order.
    fn limit_train(&mut self, n: usize) {
        self.split.train.truncate(n);
    }

    fn indices(&self, part_name: &str) -> PyResult<Vec<usize>> {
        let (p, val) = part(part_name)?;
        Ok(match (p, val) {
            (Part::Train, _) => self.split.train.clone(),
            (_, true) => self.split.validation.clone(),
            _ => self.split.test.clone(),
        })
    }

    /// Flat normalized pixels and labels for the given positions of a part.
    #[pyo3(signature = (part_name, indices, scale = 1.0))]
    fn batch(&self, part_name: &str, indices: Vec<usize>, scale: f64) -> PyResult<(Vec<f64>, Vec<usize>)> {
        let (p, _) = part(part_name)?;
        let n = self.inner.len(p);
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(PyValueError::new_err(format!("index {bad} out of range for {n} samples")));
        }
        let x: Tensor<f64> = self.inner.images(p, &indices, scale);
        Ok((x.into_data(), self.inner.batch_labels(p, &indices)))
    }
}

/// Feed-forward network over batched `[B, 1, 28, 28]` inputs.
#[pyclass(module = "optbp")]
struct Network {
    inner: optbp::Network<f32>,
    arch: Option<Architecture>,
    seed: u64,
}

#[pymethods]
impl Network {
    #[new]
    #[pyo3(signature = (arch, nonlinearity, classes = 10, pool = None, seed = 0))]
    fn new(arch: &str, nonlinearity: &Nonlinearity, classes: usize, pool: Option<&str>, seed: u64) -> PyResult<Self> {
        let arch: Architecture = parse(arch, "architecture")?;
        let spec = &nonlinearity.inner;
        let pool = match pool {
            None => default_pooling(spec),
            Some("mean") => PoolMode::Mean,
            Some("max") => PoolMode::Max,
            Some(p) => return Err(PyValueError::new_err(format!("unknown pool mode {p:?}"))),
        };
        validate_pooling(spec, pool).map_err(err)?;
        let mut inner = arch.build(classes, spec, pool).map_err(err)?;
        let mut rng = Rng::new(seed).derive(trainer::INIT_STREAM);
        trainer::init_weights(&mut inner, &InitScheme::for_run(arch, spec), &mut rng);
        Ok(Self { inner, arch: Some(arch), seed })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, seed) = load_checkpoint(&path).map_err(err)?;
        Ok(Self { inner, arch: None, seed })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, self.seed, &path).map_err(err)
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.inner.input_shape().to_vec()
    }

    #[getter]
    fn output_size(&self) -> usize {
        self.inner.output_size()
    }

    /// Weight matrices as `(shape, flat values)` pairs.
    fn weights(&self) -> Vec<(Vec<usize>, Vec<f64>)> {
        self.inner.weights().iter().map(|w| (w.shape().to_vec(), w.cast::<f64>().into_data())).collect()
    }

    fn set_weights(&mut self, weights: Vec<(Vec<usize>, Vec<f64>)>) -> PyResult<()> {
        let ws = weights.into_iter().map(|(s, d)| tensor(s, d)).collect::<PyResult<Vec<_>>>()?;
        self.inner.set_weights(ws).map_err(err)
    }

    /// Logits for a batch of `batch` flat inputs.
    fn forward(&mut self, x: Vec<f64>, batch: usize) -> PyResult<Vec<Vec<f64>>> {
        let mut shape = vec![batch];
        shape.extend_from_slice(self.inner.input_shape());
        let z = self.inner.infer(&tensor(shape, x)?).map_err(err)?;
        let k = self.inner.output_size();
        Ok(z.data().chunks(k).map(|r| r.iter().map(|&v| v as f64).collect()).collect())
    }

    fn predict(&mut self, x: Vec<f64>, batch: usize) -> PyResult<Vec<usize>> {
        let mut shape = vec![batch];
        shape.extend_from_slice(self.inner.input_shape());
        self.inner.predict(&tensor(shape, x)?).map_err(err)
    }

    /// Trains with Adam and keeps the weights of the best validation epoch.
    ///
    /// Returns a dict with the run record and per-epoch history.
    #[pyo3(signature = (dataset, epochs = 50, lr = 5e-4, batch_size = 64, loss = "mse", input_scale = None, checkpoint = None))]
    #[allow(clippy::too_many_arguments)]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        dataset: &Dataset,
        epochs: usize,
        lr: f64,
        batch_size: usize,
        loss: &str,
        input_scale: Option<f64>,
        checkpoint: Option<PathBuf>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let arch = self.arch.ok_or_else(|| PyValueError::new_err("fit needs a network built from an architecture"))?;
        let spec = self.inner.activation_specs().first().map(|s| (*s).clone());
        let spec = spec.ok_or_else(|| PyValueError::new_err("network has no activation"))?;
        let loss: LossKind = parse(loss, "loss")?;
        let config = TrainConfig {
            learning_rate: lr,
            batch_size,
            epochs,
            init_scheme: InitScheme::for_run(arch, &spec),
            input_scale: input_scale.unwrap_or_else(|| trainer::default_input_scale(arch, &spec)),
            seed: self.seed,
            derivative_mode: spec.derivative().clone(),
            loss,
            ..TrainConfig::default()
        };
        let options = TrainOptions { checkpoint, eval_batch: None };
        let net = &mut self.inner;
        let record = py
            .detach(|| trainer::train(net, &dataset.inner, &dataset.split, &config, &options))
            .map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("best_epoch", record.best_epoch)?;
        out.set_item("best_val_acc", record.best_val_acc)?;
        out.set_item("test_accuracy", record.test_accuracy)?;
        out.set_item("wall_time", record.wall_time)?;
        let history: Vec<(usize, f64, f64)> = record.epochs.iter().map(|e| (e.epoch, e.loss, e.val_acc)).collect();
        out.set_item("epochs", history)?;
        Ok(out)
    }

    fn accuracy(&mut self, dataset: &Dataset, part_name: &str, input_scale: f64) -> PyResult<f64> {
        let indices = dataset.indices(part_name)?;
        let (p, _) = part(part_name)?;
        trainer::accuracy(&mut self.inner, &dataset.inner, p, &indices, input_scale, 256).map_err(err)
    }
}

#[pyfunction]
fn sa_forward(e: f64, alpha0: f64) -> f64 {
    optbp::nonlinearity::sa_forward(e, alpha0)
}

#[pyfunction]
fn sa_derivative_exact(e: f64, alpha0: f64) -> f64 {
    optbp::nonlinearity::sa_derivative_exact(e, alpha0)
}

#[pyfunction]
fn sa_derivative_optical(e: f64, alpha0: f64) -> f64 {
    optbp::nonlinearity::sa_derivative_optical(e, alpha0)
}

#[pyfunction]
fn gs_forward(e: f64, g0: f64) -> f64 {
    optbp::nonlinearity::gs_forward(e, g0)
}

#[pyfunction]
fn gs_derivative_exact(e: f64, g0: f64) -> f64 {
    optbp::nonlinearity::gs_derivative_exact(e, g0)
}

#[pyfunction]
fn gs_derivative_optical(e: f64, g0: f64) -> f64 {
    optbp::nonlinearity::gs_derivative_optical(e, g0)
}

/// Width of the nonlinear input region for an absorber of depth `alpha0`.
#[pyfunction]
fn region_sigma(alpha0: f64) -> PyResult<f64> {
    analysis::region_sigma(alpha0).map_err(err)
}

/// `1 − S` between the optical and exact derivatives, one value per depth.
#[pyfunction]
fn optical_error_curve(alphas: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(analysis::optical_error_curve(&alphas).map_err(err)?.into_iter().map(|p| p.error).collect())
}

/// `1 − S` between `table` and the exact absorber derivative at depth `alpha0`.
#[pyfunction]
fn approximation_error(table: &Table, alpha0: f64) -> PyResult<f64> {
    let config = SimilarityConfig::for_alpha(alpha0).map_err(err)?;
    let t = table.inner.clone();
    analysis::approximation_error(move |z| t.eval(z), &config).map_err(err)
}

/// Random derivative table, optionally rejected until its error is near `target`.
#[pyfunction]
#[pyo3(signature = (seed, alpha0 = 10.0, target = None, knots = 16))]
fn random_derivative(seed: u64, alpha0: f64, target: Option<f64>, knots: usize) -> PyResult<Table> {
    let config = SimilarityConfig::for_alpha(alpha0).map_err(err)?;
    let t = target.map(|e| TargetError::new(e, config));
    let mut rng = Rng::new(seed);
    let table = analysis::random_derivative(&mut rng, knots, config.half_range, t.as_ref()).map_err(err)?;
    Ok(Table { inner: Arc::new(table) })
}

/// Lower and upper gain bounds of a weight matrix, with the iteration count.
#[pyfunction]
fn gain_bounds(rows: Vec<Vec<f64>>) -> PyResult<(f64, f64, usize)> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    let w = Tensor::new(vec![rows.len(), cols], rows.concat()).map_err(err)?;
    let r = analysis::gain_bounds(&w).map_err(err)?;
    Ok((r.lower, r.upper, r.iterations))
}

#[pymodule]
fn _optbp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Table>()?;
    m.add_class::<Nonlinearity>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Network>()?;
    m.add_function(wrap_pyfunction!(sa_forward, m)?)?;
    m.add_function(wrap_pyfunction!(sa_derivative_exact, m)?)?;
    m.add_function(wrap_pyfunction!(sa_derivative_optical, m)?)?;
    m.add_function(wrap_pyfunction!(gs_forward, m)?)?;
    m.add_function(wrap_pyfunction!(gs_derivative_exact, m)?)?;
    m.add_function(wrap_pyfunction!(gs_derivative_optical, m)?)?;
    m.add_function(wrap_pyfunction!(region_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(optical_error_curve, m)?)?;
    m.add_function(wrap_pyfunction!(approximation_error, m)?)?;
    m.add_function(wrap_pyfunction!(random_derivative, m)?)?;
    m.add_function(wrap_pyfunction!(gain_bounds, m)?)?;
    let names = [
        "Table", "Nonlinearity", "Dataset", "Network", "sa_forward", "sa_derivative_exact",
        "sa_derivative_optical", "gs_forward", "gs_derivative_exact", "gs_derivative_optical",
        "region_sigma", "optical_error_curve", "approximation_error", "random_derivative", "gain_bounds",
    ];
    m.add("__all__", names.to_vec())?;
    Ok(())
}
