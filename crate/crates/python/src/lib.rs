//! Python bindings: vocabularies, composed models, metrics, the budget
//! report and the command-line entry point.

use std::path::PathBuf;

use adapterlab::adapters::{AdapterConfig, PlacementPlan};
use adapterlab::budget::{budget_report, BudgetSpec, ReferenceBudgets};
use adapterlab::checkpoint::{compose, Checkpoint, ComponentKind};
use adapterlab::corpus::{load_jsonl, ClozeRecord};
use adapterlab::encoder::{Encoder, EncoderConfig};
use adapterlab::model::{with_language_adapters, Model};
use adapterlab::tasks::{embed_texts, eval_cloze, f1, map_at_r, ClozeExample, ConfusionCounts, Similarity};
use adapterlab::tokenizer::{train_bpe, Vocabulary};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: adapterlab::error::Error) -> PyErr {
    PyValueError::new_err(format!("{}: {e}", e.kind()))
}

fn from_json<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "Vocabulary", module = "adapterlab_py", frozen)]
struct PyVocabulary {
    inner: Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    /// Learns a byte-pair vocabulary of at most `size` entries.
    #[staticmethod]
    fn train(texts: Vec<String>, size: usize) -> PyResult<Self> {
        Ok(PyVocabulary {
            inner: train_bpe(texts.iter(), size).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyVocabulary {
            inner: Vocabulary::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    /// Ids including the start and end markers.
    fn encode(&self, text: &str) -> Vec<u32> {
        self.inner.encode(text)
    }

    fn decode(&self, ids: Vec<u32>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(err)
    }

    fn token(&self, id: u32) -> Option<String> {
        self.inner.token(id).map(str::to_string)
    }

    fn id(&self, token: &str) -> Option<u32> {
        self.inner.id(token)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Model", module = "adapterlab_py")]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    /// A freshly initialized encoder, optionally with language adapters on
    /// every layer.
    #[staticmethod]
    #[pyo3(signature = (vocab_size, num_layers=4, hidden=64, heads=4, ffn=256, max_positions=128, seed=0, language_adapters=false))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab_size: usize,
        num_layers: usize,
        hidden: usize,
        heads: usize,
        ffn: usize,
        max_positions: usize,
        seed: u64,
        language_adapters: bool,
    ) -> PyResult<Self> {
        let cfg = EncoderConfig {
            num_layers,
            hidden,
            heads,
            ffn,
            vocab_size,
            max_positions,
            ..Default::default()
        };
        let enc = Encoder::new(cfg, seed).map_err(err)?;
        let inner = if language_adapters {
            with_language_adapters(enc, &AdapterConfig::default(), seed.wrapping_add(1)).map_err(err)?
        } else {
            Model::bare(enc)
        };
        Ok(PyModel { inner })
    }

    /// Loads a backbone checkpoint and stacks adapter checkpoints on it.
    #[staticmethod]
    #[pyo3(signature = (backbone, adapters=Vec::new()))]
    fn compose(backbone: PathBuf, adapters: Vec<PathBuf>) -> PyResult<Self> {
        let b = Checkpoint::load(&backbone).map_err(err)?;
        let extra = adapters.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>, _>>().map_err(err)?;
        Ok(PyModel {
            inner: compose(&b, &extra.iter().collect::<Vec<_>>()).map_err(err)?,
        })
    }

    /// Writes the parameters owned by `kind` (`backbone`, `l_adapter` or `t_adapter`).
    fn save(&self, path: PathBuf, kind: &str) -> PyResult<()> {
        let kind = match kind {
            "backbone" => ComponentKind::Backbone,
            "l_adapter" => ComponentKind::LAdapter,
            "t_adapter" => ComponentKind::TAdapter,
            other => return Err(PyValueError::new_err(format!("unknown component `{other}`"))),
        };
        Checkpoint::from_model(&self.inner, kind).and_then(|c| c.save(&path)).map_err(err)
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.config.num_layers
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.inner.config.hidden
    }

    fn param_count(&self) -> u64 {
        self.inner.param_count()
    }

    fn plan<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        from_json(py, &self.inner.plan)
    }

    /// Keeps language adapters on layers `1..=upto` only.
    fn set_language_layers(&mut self, upto: usize) -> PyResult<()> {
        let task = self.inner.plan.task.clone();
        self.inner
            .set_plan(PlacementPlan::language_prefix(upto).with_task_layers(task))
            .map_err(err)
    }

    /// Unit-norm mean-pooled embeddings, one per text.
    #[pyo3(signature = (vocab, texts, max_len=128))]
    fn embed(&self, py: Python<'_>, vocab: &PyVocabulary, texts: Vec<String>, max_len: usize) -> PyResult<Vec<Vec<f64>>> {
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        py.detach(|| embed_texts(&self.inner, &vocab.inner, &refs, max_len))
            .map(|(v, _)| v)
            .map_err(err)
    }

    /// Accuracy on a JSONL file of cloze probes.
    fn cloze_accuracy(&self, py: Python<'_>, vocab: &PyVocabulary, probes: PathBuf) -> PyResult<f64> {
        let records = load_jsonl::<ClozeRecord>(&probes).map_err(err)?.records;
        let examples = records
            .iter()
            .map(|r| ClozeExample::from_record(r, &vocab.inner))
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        py.detach(|| eval_cloze(&self.inner, &examples)).map(|r| r.accuracy).map_err(err)
    }
}

/// Mean average precision at R; `similarity` is `cosine` or `neg_euclidean`.
#[pyfunction]
#[pyo3(signature = (vectors, labels, similarity="cosine"))]
fn mean_average_precision_at_r(vectors: Vec<Vec<f64>>, labels: Vec<String>, similarity: &str) -> PyResult<f64> {
    let sim = match similarity {
        "cosine" => Similarity::Cosine,
        "neg_euclidean" => Similarity::NegEuclidean,
        other => return Err(PyValueError::new_err(format!("unknown similarity `{other}`"))),
    };
    Ok(map_at_r(&vectors, &labels, sim).map_err(err)?.map_at_r)
}

/// Precision, recall and F1 of boolean predictions.
#[pyfunction]
fn f1_score(predicted: Vec<bool>, gold: Vec<bool>) -> PyResult<(f64, f64, f64)> {
    let s = f1(&ConfusionCounts::from_predictions(&predicted, &gold).map_err(err)?);
    Ok((s.precision, s.recall, s.f1))
}

/// Parameter and memory budget as a dict; the reference geometry by default.
#[pyfunction]
#[pyo3(signature = (paper_scale=true))]
fn budget(py: Python<'_>, paper_scale: bool) -> PyResult<Bound<'_, PyAny>> {
    let spec = if paper_scale {
        BudgetSpec::paper_scale()
    } else {
        BudgetSpec::from_configs(&EncoderConfig::default(), &AdapterConfig::default())
    };
    from_json(py, &budget_report(&spec, &ReferenceBudgets::default()).map_err(err)?)
}

/// Runs the command line with `args` (without the program name); returns the exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("adapterlab".to_string()).chain(args).collect();
    py.detach(|| adapterlab::cli::dispatch(argv))
}

#[pymodule]
fn adapterlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(mean_average_precision_at_r, m)?)?;
    m.add_function(wrap_pyfunction!(f1_score, m)?)?;
    m.add_function(wrap_pyfunction!(budget, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
