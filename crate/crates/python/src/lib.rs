//! Python bindings: model loading and scoring, file-based training, the
//! core metrics, and the gradient check.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use kehnn_core::checkpoint;
use kehnn_core::eval::{self, RankedGroup};
use kehnn_core::knowledge::load_knowledge_defs;
use kehnn_core::matcher::{predict, EncodedExample, ModelParams};
use kehnn_core::text::{self, load_dataset, Vocabulary};
use kehnn_core::trainer::{self, TrainConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

/// Lowercasing word tokenizer used by the pipeline.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    text::tokenize(text)
}

/// Fraction of exact matches between predicted and true class ids.
#[pyfunction]
fn accuracy(preds: Vec<usize>, labels: Vec<usize>) -> PyResult<f64> {
    eval::accuracy(&preds, &labels).map_err(value_err)
}

/// R_n@k over groups of (score, is_positive) candidates.
#[pyfunction]
fn recall_at_k(groups: Vec<Vec<(f64, bool)>>, k: usize) -> PyResult<f64> {
    let ranked: Vec<RankedGroup> = groups
        .into_iter()
        .enumerate()
        .map(|(id, candidates)| RankedGroup { id, candidates })
        .collect();
    eval::recall_at_k(&ranked, k).map_err(value_err)
}

/// Finite-difference gradient check on a small synthetic instance of the
/// configured model; returns the max relative error.
#[pyfunction]
#[pyo3(signature = (config_json, eps = 1e-5))]
fn gradcheck(config_json: &str, eps: f64) -> PyResult<f64> {
    let config: TrainConfig = serde_json::from_str(config_json).map_err(value_err)?;
    config.validate().map_err(value_err)?;
    let report = trainer::synthetic_gradcheck(config, eps).map_err(value_err)?;
    Ok(report.max_rel_error)
}

/// Trains from JSON-lines files and writes `best.ckpt` under `out_dir`.
/// Returns the history as (epoch, train_loss, valid_metric) tuples.
#[pyfunction]
#[pyo3(signature = (config_json, train_path, valid_path, out_dir, knowledge_path = None, embeddings_path = None))]
fn train_files(
    config_json: &str,
    train_path: &str,
    valid_path: &str,
    out_dir: &str,
    knowledge_path: Option<&str>,
    embeddings_path: Option<&str>,
) -> PyResult<Vec<(usize, f64, f64)>> {
    let config: TrainConfig = serde_json::from_str(config_json).map_err(value_err)?;
    config.validate().map_err(value_err)?;
    let train_records = load_dataset(train_path, config.c).map_err(value_err)?;
    let valid_records = load_dataset(valid_path, config.c).map_err(value_err)?;
    let defs = match knowledge_path {
        Some(p) => load_knowledge_defs(p).map_err(value_err)?,
        None => Vec::new(),
    };
    let embeddings = embeddings_path.map(PathBuf::from);

    let prepared = trainer::prepare(
        config,
        &train_records,
        &valid_records,
        &defs,
        embeddings.as_deref(),
    )
    .map_err(value_err)?;
    let vocab = prepared.vocab.clone();
    let outcome =
        trainer::train(prepared.params, &prepared.train, &prepared.valid).map_err(value_err)?;

    std::fs::create_dir_all(out_dir).map_err(io_err)?;
    let ckpt = PathBuf::from(out_dir).join("best.ckpt");
    checkpoint::save(&ckpt, &outcome.params, &vocab).map_err(io_err)?;

    Ok(outcome
        .history
        .iter()
        .map(|row| (row.epoch, row.train_loss, row.valid_metric))
        .collect())
}

/// A trained matching model restored from a checkpoint.
#[pyclass]
struct Model {
    params: ModelParams,
    vocab: Vocabulary,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Model> {
        let (params, vocab) = checkpoint::load(path).map_err(io_err)?;
        Ok(Model { params, vocab })
    }

    /// Class distribution for one text pair with optional knowledge keys.
    #[pyo3(signature = (text_a, text_b, knowledge_a = "", knowledge_b = ""))]
    fn score(
        &self,
        text_a: &str,
        text_b: &str,
        knowledge_a: &str,
        knowledge_b: &str,
    ) -> PyResult<Vec<f64>> {
        let max_len = self.params.config.max_len;
        let example = EncodedExample {
            x: text::encode_pad(&text::tokenize(text_a), &self.vocab, max_len),
            y: text::encode_pad(&text::tokenize(text_b), &self.vocab, max_len),
            kx: self.params.resolve_knowledge(knowledge_a),
            ky: self.params.resolve_knowledge(knowledge_b),
            label: 0,
        };
        predict(&self.params, &example).map_err(value_err)
    }

    /// Argmax class for one text pair.
    #[pyo3(signature = (text_a, text_b, knowledge_a = "", knowledge_b = ""))]
    fn predict_label(
        &self,
        text_a: &str,
        text_b: &str,
        knowledge_a: &str,
        knowledge_b: &str,
    ) -> PyResult<usize> {
        let probs = self.score(text_a, text_b, knowledge_a, knowledge_b)?;
        Ok(trainer::argmax(&probs))
    }

    /// The stored training configuration as JSON.
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.params.config).map_err(value_err)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.params.config.c
    }

    #[getter]
    fn knowledge_keys(&self) -> Vec<String> {
        self.params.knowledge_keys().to_vec()
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(classes={}, vocab={}, channels={})",
            self.params.config.c,
            self.vocab.len(),
            self.params.config.channels
        )
    }
}

#[pymodule]
fn kehnn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(train_files, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
