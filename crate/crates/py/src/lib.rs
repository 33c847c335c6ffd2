//! Python bindings: corpus generation, the model, training, evaluation and
//! the gradient-check suites. Models are 32-bit on this side.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vista3d::config::RunConfig;
use vista3d::corpus::{generate_corpus, Task};
use vista3d::data::{in_memory_corpus, Dataset, InMemoryCorpus};
use vista3d::model::{greedy_decode, grounding_logits, load_checkpoint, save_checkpoint, forward, ModelInput};
use vista3d::objectives::{mask_text as mask_text_impl, task_input, TaskTargets};
use vista3d::tensor::{DType, Graph};
use vista3d::trainer::{evaluate, finetune, pretrain, EvalOptions};
use vista3d::verify::{gradcheck_suite, primitive_suite, SuiteOptions};
use vista3d::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn config_from(toml: Option<&str>) -> PyResult<RunConfig> {
    toml.map_or_else(|| Ok(RunConfig::default()), |t| RunConfig::parse(t).map_err(py_err))
}

fn parse_task(task: &str) -> PyResult<Task> {
    task.parse().map_err(|e: String| PyValueError::new_err(e))
}

fn to_py<'py>(py: Python<'py>, value: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match value {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for v in items {
                list.append(to_py(py, v)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, v) in map {
                dict.set_item(k, to_py(py, v)?)?;
            }
            dict.into_any()
        }
    })
}

fn serialize<'py, S: serde::Serialize>(py: Python<'py>, value: &S) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &v)
}

/// Train and eval splits of every task, generated in memory.
#[pyclass(module = "vista3d_py", frozen)]
struct Corpus {
    inner: InMemoryCorpus,
    config: RunConfig,
}

impl Corpus {
    fn split(&self, task: &str, split: &str) -> PyResult<&Dataset> {
        let task = parse_task(task)?;
        let map = match split {
            "train" => &self.inner.train,
            "eval" => &self.inner.eval,
            other => return Err(PyValueError::new_err(format!("split must be train or eval, got {other:?}"))),
        };
        map.get(&task)
            .ok_or_else(|| PyValueError::new_err(format!("no {task} samples in the {split} split")))
    }
}

#[pymethods]
impl Corpus {
    /// Generates `scenes` scenes with the given seed. `config` is run-config
    /// TOML; its corpus and model sections apply.
    #[new]
    #[pyo3(signature = (seed=0, scenes=400, config=None))]
    fn new(seed: u64, scenes: usize, config: Option<&str>) -> PyResult<Self> {
        let config = config_from(config)?;
        let m = &config.model;
        let inner = in_memory_corpus(seed, scenes, &config.corpus, m.max_text_len, m.point_config()).map_err(py_err)?;
        Ok(Self { inner, config })
    }

    #[getter]
    fn vocabulary(&self) -> Vec<String> {
        self.inner.vocab.words().to_vec()
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.inner.classes.clone()
    }

    /// `{task: (train, eval)}` sample counts.
    fn sizes(&self) -> BTreeMap<String, (usize, usize)> {
        self.inner
            .train
            .iter()
            .map(|(task, d)| (task.to_string(), (d.len(), self.inner.eval.get(task).map_or(0, Dataset::len))))
            .collect()
    }

    #[pyo3(signature = (task, split="eval"))]
    fn mean_objects(&self, task: &str, split: &str) -> PyResult<f64> {
        Ok(self.split(task, split)?.mean_objects())
    }

    /// Token ids of one sample (`[CLS]` first), its scene id and object count.
    #[pyo3(signature = (task, index, split="eval"))]
    fn sample(&self, task: &str, index: usize, split: &str) -> PyResult<(Vec<usize>, u64, usize)> {
        let d = self.split(task, split)?;
        let e = d
            .examples
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range ({} samples)", d.len())))?;
        Ok((e.text.clone(), e.scene_id(), e.scene.len()))
    }

    fn decode(&self, ids: Vec<usize>) -> String {
        self.inner.vocab.decode(&ids)
    }
}

#[pyclass(module = "vista3d_py")]
struct Model {
    inner: vista3d::model::Model<f32>,
}

#[pymethods]
impl Model {
    /// A freshly initialized model sized for `corpus`. `config` is run-config
    /// TOML; only the model section applies. The dtype is forced to f32.
    #[new]
    #[pyo3(signature = (corpus, seed=0, config=None))]
    fn new(corpus: &Corpus, seed: u64, config: Option<&str>) -> PyResult<Self> {
        let mut model_config = config.map_or_else(|| Ok(corpus.config.clone()), |t| config_from(Some(t)))?.model;
        model_config.dtype = DType::F32;
        let inner = vista3d::model::Model::new(model_config, corpus.inner.vocab.clone(), corpus.inner.classes.clone(), seed)
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = load_checkpoint(&path).map_err(|e| py_err(e.into()))?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(|e| py_err(e.into()))
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params.num_elements()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params.iter().map(|(_, n, _)| n.to_string()).collect()
    }

    /// Shape and flat values of one parameter.
    fn param(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let t = self
            .inner
            .params
            .by_name(name)
            .ok_or_else(|| PyValueError::new_err(format!("no parameter named {name:?}")))?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    /// The model configuration as a dict.
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        serialize(py, &self.inner.config)
    }

    /// Pre-trains on the corpus; returns one metrics dict per epoch.
    /// `config` is run-config TOML whose `pretrain` section applies.
    #[pyo3(signature = (corpus, config=None, out=None))]
    fn pretrain<'py>(
        &mut self,
        py: Python<'py>,
        corpus: &Corpus,
        config: Option<&str>,
        out: Option<PathBuf>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cfg = config.map_or_else(|| Ok(corpus.config.clone()), |t| config_from(Some(t)))?.pretrain;
        let run = out.map(vista3d::trainer::RunDir::create).transpose().map_err(py_err)?;
        let train = &corpus.inner.train[&Task::Pretrain];
        let eval = corpus.inner.eval.get(&Task::Pretrain);
        let model = &mut self.inner;
        let outcome = py.detach(|| pretrain(model, train, eval, &cfg, run.as_ref(), None)).map_err(py_err)?;
        serialize(py, &outcome.records)
    }

    /// Fine-tunes on `task` (grounding, qa or caption).
    #[pyo3(signature = (corpus, task, config=None, out=None))]
    fn finetune<'py>(
        &mut self,
        py: Python<'py>,
        corpus: &Corpus,
        task: &str,
        config: Option<&str>,
        out: Option<PathBuf>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let cfg = config.map_or_else(|| Ok(corpus.config.clone()), |t| config_from(Some(t)))?.finetune;
        let run = out.map(vista3d::trainer::RunDir::create).transpose().map_err(py_err)?;
        let train = corpus.split(task, "train")?;
        let eval = corpus.split(task, "eval").ok();
        let model = &mut self.inner;
        let outcome = py.detach(|| finetune(model, train, eval, &cfg, run.as_ref())).map_err(py_err)?;
        serialize(py, &outcome.records)
    }

    /// Held-out (or training) metrics on one task.
    #[pyo3(signature = (corpus, task, split="eval", batch_size=64))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        corpus: &Corpus,
        task: &str,
        split: &str,
        batch_size: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let data = corpus.split(task, split)?;
        let opts = EvalOptions::for_model(&self.inner, batch_size);
        let model = &self.inner;
        let m = py.detach(|| evaluate(model, data, &opts)).map_err(py_err)?;
        serialize(py, &m)
    }

    /// Per-object grounding scores for one grounding sample.
    #[pyo3(signature = (corpus, index, split="eval"))]
    fn grounding_scores(&self, corpus: &Corpus, index: usize, split: &str) -> PyResult<Vec<f32>> {
        let data = corpus.split("grounding", split)?;
        let ex = data
            .examples
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))?;
        let targets = TaskTargets::from_annotations(Task::Grounding, [&ex.annotation]).map_err(py_err)?;
        let input: ModelInput = task_input(Task::Grounding, &[ex], &targets);
        let mut g = Graph::with_params(&self.inner.params);
        let out = forward(&mut g, &self.inner.config, &input).map_err(|e| py_err(e.into()))?;
        let logits = grounding_logits(&mut g, &out).map_err(|e| py_err(e.into()))?;
        Ok(g.value(logits)[..ex.scene.len()].to_vec())
    }

    /// Greedy caption for object `object` of the scene behind a caption sample.
    #[pyo3(signature = (corpus, index, object, split="eval"))]
    fn caption(&self, corpus: &Corpus, index: usize, object: usize, split: &str) -> PyResult<String> {
        let data = corpus.split("caption", split)?;
        let ex = data
            .examples
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))?;
        if object >= ex.scene.len() {
            return Err(PyValueError::new_err(format!("scene has {} objects", ex.scene.len())));
        }
        let ids = greedy_decode(&self.inner, ex.scene.clone(), object).map_err(|e| py_err(e.into()))?;
        Ok(self.inner.vocab.decode(&ids))
    }
}

/// Writes the six `{task}_{split}.jsonl` files and returns the summary.
#[pyfunction]
#[pyo3(signature = (out, seed=0, scenes=400, config=None))]
fn write_corpus<'py>(
    py: Python<'py>,
    out: PathBuf,
    seed: u64,
    scenes: usize,
    config: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config_from(config)?;
    let summary = generate_corpus(seed, scenes, &out, &cfg.corpus).map_err(|e| py_err(e.into()))?;
    let dict = PyDict::new(py);
    dict.set_item("scenes", summary.scenes)?;
    dict.set_item("mean_objects", summary.mean_objects)?;
    let counts = PyDict::new(py);
    for (task, c) in &summary.counts {
        counts.set_item(task.to_string(), (c.train, c.eval))?;
    }
    dict.set_item("counts", counts)?;
    dict.set_item("relations", summary.relations.clone())?;
    dict.set_item("files", summary.files.clone())?;
    Ok(dict.into_any())
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    vista3d::model::tokenize(text)
}

/// `(d, sin θh, cos θh, sin θv, cos θv)` from center `a` to center `b`.
#[pyfunction]
fn spatial_pair(a: [f64; 3], b: [f64; 3]) -> Vec<f64> {
    vista3d::transformer::spatial_pair(a, b).to_vec()
}

/// Masks text ids; returns the corrupted ids and labels (-1 where unmasked).
/// Random replacements are drawn from `words_start..words_end`.
#[pyfunction]
#[pyo3(signature = (ids, ratio, words_start, words_end, seed=0))]
fn mask_text(ids: Vec<usize>, ratio: f64, words_start: usize, words_end: usize, seed: u64) -> PyResult<(Vec<usize>, Vec<i64>)> {
    if words_start >= words_end || !(0.0..=1.0).contains(&ratio) {
        return Err(PyValueError::new_err("need words_start < words_end and 0 <= ratio <= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(mask_text_impl(&ids, ratio, words_start..words_end, &mut rng))
}

/// Runs the primitive and loss gradient checks. Returns
/// `[(name, max_rel_error, passed)]`.
#[pyfunction]
#[pyo3(signature = (tolerance=1e-3, step=1e-5, max_elements=None, seed=0))]
fn gradcheck(
    py: Python<'_>,
    tolerance: f64,
    step: f64,
    max_elements: Option<usize>,
    seed: u64,
) -> PyResult<Vec<(String, f64, bool)>> {
    let opts = SuiteOptions {
        tolerance,
        step,
        max_elements_per_param: max_elements,
        seed,
        ..Default::default()
    };
    let entries = py
        .detach(|| -> vista3d::Result<_> {
            let mut e = primitive_suite(&opts)?;
            e.extend(gradcheck_suite(&opts)?);
            Ok(e)
        })
        .map_err(py_err)?;
    Ok(entries
        .into_iter()
        .map(|e| (e.loss, e.report.max_rel_error(), e.report.passed()))
        .collect())
}

#[pymodule]
fn vista3d_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(write_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(spatial_pair, m)?)?;
    m.add_function(wrap_pyfunction!(mask_text, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add("DEFAULT_CONFIG", RunConfig::default().to_toml())?;
    Ok(())
}
