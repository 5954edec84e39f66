//! Python bindings: tensors, the autodiff tape, datasets, models and the
//! experiment runners.

use std::path::PathBuf;

use promptlab::checkpoint::{config_hash as hash_value, Checkpoint};
use promptlab::data::{encode_example, make_synthetic, Split, SyntheticKind, SyntheticSpec};
use promptlab::experiments::{
    fit_backbone, run_cost_report, run_gradcheck, run_layer_sweep, run_transfer, ExperimentConfig,
    ExperimentReport, GradcheckSpec,
};
use promptlab::trainer::{lr_at as schedule_lr, TrainData};
use promptlab::{
    evaluate, train, BackboneConfig, Error, Example, MethodConfig, MethodKind, PeftModel, Tape,
    TaskDataset, Tensor, TrainConfig, Var,
};
use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn from_py<T: DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py
        .import("json")?
        .call_method1("dumps", (obj,))?
        .extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn from_py_or_default<T: DeserializeOwned + Default>(
    py: Python<'_>,
    obj: Option<&Bound<'_, PyAny>>,
) -> PyResult<T> {
    obj.map_or_else(|| Ok(T::default()), |o| from_py(py, o))
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn split_of(name: &str) -> PyResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "dev" => Ok(Split::Dev),
        "test" => Ok(Split::Test),
        other => Err(PyValueError::new_err(format!("unknown split {other:?}"))),
    }
}

#[pyclass(name = "Tensor", module = "promptlab_py", from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (shape, data, requires_grad = false))]
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> PyResult<Self> {
        let inner = Tensor::new(shape, data).map_err(err)?;
        Ok(Self {
            inner: inner.with_requires_grad(requires_grad),
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self {
            inner: Tensor::zeros(&shape),
        }
    }

    #[staticmethod]
    fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<Self> {
        let inner = Tensor::new(
            vec![rows.len(), rows.first().map_or(0, Vec::len)],
            rows.concat(),
        )
        .map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    #[getter]
    fn requires_grad(&self) -> bool {
        self.inner.requires_grad()
    }

    #[setter]
    fn set_requires_grad(&mut self, value: bool) {
        self.inner.set_requires_grad(value);
    }

    fn tolist(&self) -> Vec<Vec<f64>> {
        (0..self.inner.rows())
            .map(|r| self.inner.row(r).to_vec())
            .collect()
    }

    fn transpose(&self) -> Self {
        Self {
            inner: self.inner.transpose(),
        }
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        let inner = self.inner.clone().reshape(&shape).map_err(err)?;
        Ok(Self { inner })
    }

    fn max_abs_diff(&self, other: &PyTensor) -> f64 {
        self.inner.max_abs_diff(&other.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// A reverse-mode tape. Nodes are referred to by integer handles.
#[pyclass(name = "Tape", module = "promptlab_py", unsendable)]
struct PyTape {
    tape: Tape<'static>,
    vars: Vec<Var>,
}

impl PyTape {
    fn var(&self, h: usize) -> PyResult<Var> {
        self.vars
            .get(h)
            .copied()
            .ok_or_else(|| PyIndexError::new_err(format!("no tape node {h}")))
    }

    fn push(&mut self, v: Var) -> usize {
        self.vars.push(v);
        self.vars.len() - 1
    }

    fn push_result(&mut self, v: promptlab::Result<Var>) -> PyResult<usize> {
        Ok(self.push(v.map_err(err)?))
    }
}

#[pymethods]
impl PyTape {
    #[new]
    fn new() -> Self {
        Self {
            tape: Tape::new(),
            vars: Vec::new(),
        }
    }

    fn leaf(&mut self, t: &PyTensor) -> usize {
        let v = self.tape.leaf_owned(t.inner.clone());
        self.push(v)
    }

    fn constant(&mut self, t: &PyTensor) -> PyResult<usize> {
        let v = self
            .tape
            .constant(t.inner.shape().to_vec(), t.inner.data().to_vec());
        self.push_result(v)
    }

    fn matmul(&mut self, a: usize, b: usize) -> PyResult<usize> {
        let v = self.tape.matmul(self.var(a)?, self.var(b)?);
        self.push_result(v)
    }

    fn add(&mut self, a: usize, b: usize) -> PyResult<usize> {
        let v = self.tape.add(self.var(a)?, self.var(b)?);
        self.push_result(v)
    }

    fn mul(&mut self, a: usize, b: usize) -> PyResult<usize> {
        let v = self.tape.mul(self.var(a)?, self.var(b)?);
        self.push_result(v)
    }

    fn add_bias(&mut self, a: usize, bias: usize) -> PyResult<usize> {
        let v = self.tape.add_bias(self.var(a)?, self.var(bias)?);
        self.push_result(v)
    }

    fn scale(&mut self, a: usize, s: f64) -> PyResult<usize> {
        let v = self.tape.scale(self.var(a)?, s);
        Ok(self.push(v))
    }

    fn relu(&mut self, a: usize) -> PyResult<usize> {
        let v = self.tape.relu(self.var(a)?);
        Ok(self.push(v))
    }

    fn transpose(&mut self, a: usize) -> PyResult<usize> {
        let v = self.tape.transpose(self.var(a)?);
        self.push_result(v)
    }

    fn reshape(&mut self, a: usize, shape: Vec<usize>) -> PyResult<usize> {
        let v = self.tape.reshape(self.var(a)?, &shape);
        self.push_result(v)
    }

    #[pyo3(signature = (x, mask = None))]
    fn softmax_rows(&mut self, x: usize, mask: Option<Vec<f64>>) -> PyResult<usize> {
        let v = self.tape.softmax_rows(self.var(x)?, mask.as_deref());
        self.push_result(v)
    }

    fn mean_rows(&mut self, x: usize, weights: Vec<f64>) -> PyResult<usize> {
        let v = self.tape.mean_rows(self.var(x)?, &weights);
        self.push_result(v)
    }

    fn concat_rows(&mut self, a: usize, b: usize) -> PyResult<usize> {
        let v = self.tape.concat_rows(self.var(a)?, self.var(b)?);
        self.push_result(v)
    }

    #[pyo3(signature = (x, gamma, beta, eps = 1e-5))]
    fn layer_norm(&mut self, x: usize, gamma: usize, beta: usize, eps: f64) -> PyResult<usize> {
        let v = self
            .tape
            .layer_norm(self.var(x)?, self.var(gamma)?, self.var(beta)?, eps);
        self.push_result(v)
    }

    fn sum(&mut self, a: usize) -> PyResult<usize> {
        let v = self.tape.sum(self.var(a)?);
        Ok(self.push(v))
    }

    fn cross_entropy(&mut self, logits: usize, label: usize) -> PyResult<usize> {
        let v = self.tape.cross_entropy(self.var(logits)?, label);
        self.push_result(v)
    }

    fn backward(&mut self, loss: usize) -> PyResult<()> {
        let v = self.var(loss)?;
        self.tape.backward(v).map_err(err)
    }

    fn value(&self, h: usize) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.tape.tensor(self.var(h)?),
        })
    }

    fn grad(&self, h: usize) -> PyResult<Option<PyTensor>> {
        let v = self.var(h)?;
        match self.tape.grad(v) {
            None => Ok(None),
            Some(g) => {
                let inner = Tensor::new(self.tape.shape(v).to_vec(), g.to_vec()).map_err(err)?;
                Ok(Some(PyTensor { inner }))
            }
        }
    }

    fn __len__(&self) -> usize {
        self.vars.len()
    }
}

#[pyclass(name = "Dataset", module = "promptlab_py", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: TaskDataset,
}

#[pymethods]
impl PyDataset {
    /// Generates a synthetic task: "keyword", "pair_match" or "vocab_shifted".
    #[staticmethod]
    #[pyo3(signature = (kind, seed = 7, train = 512, dev = 128, test = 128, overlap = None))]
    fn synthetic(
        py: Python<'_>,
        kind: &Bound<'_, PyAny>,
        seed: u64,
        train: usize,
        dev: usize,
        test: usize,
        overlap: Option<f64>,
    ) -> PyResult<Self> {
        let kind: SyntheticKind = from_py(py, kind)?;
        let mut spec = SyntheticSpec::new(kind, seed, train, dev, test);
        if let Some(o) = overlap {
            spec = spec.with_overlap(o);
        }
        Ok(Self {
            inner: make_synthetic(&spec).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: TaskDataset::load_dir(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_dir(&path).map_err(err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab.len()
    }

    fn size(&self, split: &str) -> PyResult<usize> {
        Ok(self.inner.split(split_of(split)?).len())
    }

    fn examples<'py>(&self, py: Python<'py>, split: &str) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.split(split_of(split)?))
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset({:?}, train={}, dev={}, test={})",
            self.inner.name,
            self.inner.train.len(),
            self.inner.dev.len(),
            self.inner.test.len()
        )
    }
}

/// A frozen backbone plus one trainable method and classification head.
#[pyclass(name = "Model", module = "promptlab_py")]
struct PyModel {
    inner: PeftModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (backbone = None, method = None, seed = 0))]
    fn new(
        py: Python<'_>,
        backbone: Option<&Bound<'_, PyAny>>,
        method: Option<&Bound<'_, PyAny>>,
        seed: u64,
    ) -> PyResult<Self> {
        let bc: BackboneConfig = from_py_or_default(py, backbone)?;
        let mc: MethodConfig = from_py_or_default(py, method)?;
        Ok(Self {
            inner: PeftModel::build(bc, mc, seed).map_err(err)?,
        })
    }

    /// Builds a model whose vocabulary and class count fit `dataset`.
    #[staticmethod]
    #[pyo3(signature = (dataset, backbone = None, method = None, seed = 0))]
    fn for_dataset(
        py: Python<'_>,
        dataset: &PyDataset,
        backbone: Option<&Bound<'_, PyAny>>,
        method: Option<&Bound<'_, PyAny>>,
        seed: u64,
    ) -> PyResult<Self> {
        let bc: BackboneConfig = from_py_or_default(py, backbone)?;
        let mc: MethodConfig = from_py_or_default(py, method)?;
        let bc = fit_backbone(&bc, &dataset.inner);
        Ok(Self {
            inner: PeftModel::build(bc, mc, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, key = None))]
    fn load(path: PathBuf, key: Option<&str>) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(err)?;
        let inner = match key {
            Some(k) => ck.model(k),
            None => ck.single_model(),
        }
        .map_err(err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint::from_model(&self.inner)
            .and_then(|ck| ck.save(&path))
            .map_err(err)
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.inner.method_config.kind.name()
    }

    fn param_count<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.param_count())
    }

    fn parameters(&self) -> Vec<(String, PyTensor)> {
        self.inner
            .trainable_parameters()
            .into_iter()
            .map(|(k, t)| (k, PyTensor { inner: t.clone() }))
            .collect()
    }

    /// Token ids for one input, tokenised with the dataset's vocabulary.
    #[pyo3(signature = (dataset, s1, s2 = None))]
    fn encode(&self, dataset: &PyDataset, s1: String, s2: Option<String>) -> PyResult<Vec<usize>> {
        let ex = Example {
            id: String::new(),
            s1,
            s2,
            label: 0,
        };
        encode_example(&ex, &dataset.inner.vocab, self.inner.encoding_budget()).map_err(err)
    }

    fn logits(&self, tokens: Vec<usize>) -> PyResult<PyTensor> {
        Ok(PyTensor {
            inner: self.inner.logits(&tokens).map_err(err)?,
        })
    }

    fn predict(&self, tokens: Vec<usize>) -> PyResult<usize> {
        self.inner.predict(&tokens).map_err(err)
    }

    fn loss(&self, tokens: Vec<usize>, label: usize) -> PyResult<f64> {
        self.inner.loss(&tokens, label).map_err(err)
    }

    /// The generated `n × t` prompt, or None for methods without one.
    fn prompt(&self, tokens: Vec<usize>) -> PyResult<Option<PyTensor>> {
        let p = self.inner.prompt_for(&tokens).map_err(err)?;
        Ok(p.map(|p| PyTensor { inner: p.values }))
    }

    #[pyo3(signature = (tokens, label, step = 1e-5))]
    fn gradient_check(
        &self,
        tokens: Vec<usize>,
        label: usize,
        step: f64,
    ) -> PyResult<(f64, Vec<(String, f64)>)> {
        let gc = self
            .inner
            .gradient_check(&tokens, label, step)
            .map_err(err)?;
        Ok((gc.max_rel_error, gc.per_tensor))
    }

    /// Trains on the dataset's train split and returns the training record.
    #[pyo3(signature = (dataset, config = None))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        dataset: &PyDataset,
        config: Option<&Bound<'_, PyAny>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cfg: TrainConfig = from_py_or_default(py, config)?;
        let record = train(
            &mut self.inner,
            TrainData::from_dataset(&dataset.inner),
            &cfg,
        )
        .map_err(err)?;
        to_py(py, &record)
    }

    #[pyo3(signature = (dataset, split = "dev"))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        split: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        let ds = &dataset.inner;
        let m = evaluate(
            &self.inner,
            ds.split(split_of(split)?),
            &ds.vocab,
            ds.num_classes,
            ds.metric_kind,
        )
        .map_err(err)?;
        to_py(py, &m)
    }

    fn __repr__(&self) -> String {
        let c = self.inner.param_count();
        format!("Model({}, trainable={})", self.method(), c.total)
    }
}

/// Finite-difference gradient check of a small randomly initialised model.
#[pyfunction]
#[pyo3(signature = (method = "id-spam", n = 8, t = 2, c = None, layers = 2, seed = 0, step = 1e-5))]
fn gradcheck(
    method: &str,
    n: usize,
    t: usize,
    c: Option<usize>,
    layers: usize,
    seed: u64,
    step: f64,
) -> PyResult<f64> {
    let spec = GradcheckSpec {
        hidden: n,
        prompt_len: t,
        bottleneck: c,
        layers,
        seed,
        step,
        ..GradcheckSpec::new(MethodKind::parse(method).map_err(err)?)
    };
    Ok(run_gradcheck(&spec).map_err(err)?.max_rel_error)
}

#[pyfunction]
fn lr_at(step: usize, total_steps: usize, peak_lr: f64) -> PyResult<f64> {
    schedule_lr(step, total_steps, peak_lr).map_err(err)
}

/// Short stable hash of any JSON-serialisable value.
#[pyfunction]
fn config_hash(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<String> {
    let v: serde_json::Value = from_py(py, value)?;
    hash_value(&v).map_err(err)
}

#[pyfunction]
fn method_names() -> Vec<&'static str> {
    MethodKind::ALL.iter().map(|k| k.name()).collect()
}

/// Runs "sweep", "transfer" or "cost" from an experiment config dict.
/// Returns the report as a dict with an extra "csv" entry.
#[pyfunction]
fn run_experiment<'py>(
    py: Python<'py>,
    config: &Bound<'_, PyAny>,
    kind: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg: ExperimentConfig = from_py(py, config)?;
    let report: ExperimentReport = match kind {
        "sweep" => run_layer_sweep(&cfg.sweep_spec(cfg.dataset.load().map_err(err)?)),
        "transfer" => {
            let target = cfg
                .transfer
                .as_ref()
                .ok_or_else(|| PyValueError::new_err("config has no \"transfer\" section"))?
                .target
                .load()
                .map_err(err)?;
            let source = cfg.dataset.load().map_err(err)?;
            cfg.transfer_spec(source, target)
                .and_then(|s| run_transfer(&s))
        }
        "cost" => run_cost_report(&cfg.cost_spec()),
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown experiment {other:?}"
            )))
        }
    }
    .map_err(err)?;
    let out = to_py(py, &report)?;
    out.set_item("csv", report.to_csv())?;
    Ok(out)
}

#[pymodule]
fn promptlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyTape>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(method_names, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
