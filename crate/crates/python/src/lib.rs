//! Python bindings: embedding stores, the reference text embedder, text
//! normalization, top-k search, losses and micro-F1.

use std::collections::BTreeMap;
use std::path::PathBuf;

use attrlink::corpus::{read_embeddings, write_embeddings};
use attrlink::encoders::hash_embed as core_hash_embed;
use attrlink::evalbench::{micro_f1 as core_micro_f1, Setting};
use attrlink::optim::ce_loss as core_ce_loss;
use attrlink::retrieval::top_k_cosine;
use attrlink::textnorm::{self, Stopwords};
use pyo3::exceptions::{PyIOError, PyKeyError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: attrlink::Error) -> PyErr {
    match e {
        attrlink::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Keyed float32 vectors of one dimension, stored on disk as AMEV1.
#[pyclass(name = "EmbeddingStore", module = "attrlink")]
struct PyEmbeddingStore {
    inner: attrlink::corpus::EmbeddingStore,
}

#[pymethods]
impl PyEmbeddingStore {
    #[new]
    #[pyo3(signature = (dim, normalized = false))]
    fn new(dim: usize, normalized: bool) -> PyResult<Self> {
        let inner = attrlink::corpus::EmbeddingStore::new(dim, normalized).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: read_embeddings(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_embeddings(&self.inner, &path).map_err(to_py)
    }

    /// Adds or replaces `key`. Normalized stores reject vectors whose norm
    /// is not 1.
    fn insert(&mut self, key: String, vector: Vec<f32>) -> PyResult<()> {
        self.inner.insert(key, vector).map_err(to_py)
    }

    fn get(&self, key: &str) -> PyResult<Vec<f32>> {
        self.inner
            .get(key)
            .map(<[f32]>::to_vec)
            .ok_or_else(|| PyKeyError::new_err(key.to_string()))
    }

    fn keys(&self) -> Vec<String> {
        self.inner.iter().map(|(k, _)| k.to_string()).collect()
    }

    /// `(key, cosine)` pairs, best first, ties by key.
    fn top_k(&self, query: Vec<f32>, k: usize) -> PyResult<Vec<(String, f64)>> {
        top_k_cosine(&query, &self.inner, k).map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn normalized(&self) -> bool {
        self.inner.is_normalized()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __contains__(&self, key: &str) -> bool {
        self.inner.contains(key)
    }
}

#[pyfunction]
#[pyo3(signature = (text, dim = 256, seed = 0))]
fn hash_embed(text: &str, dim: usize, seed: u64) -> PyResult<Vec<f32>> {
    core_hash_embed(text, dim, seed).map_err(to_py)
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    textnorm::tokenize(text)
}

#[pyfunction]
fn normalize_token(token: &str) -> String {
    textnorm::normalize_token(token)
}

/// Candidate noun chunks under the bundled stopword list.
#[pyfunction]
fn noun_chunks(text: &str) -> Vec<String> {
    textnorm::noun_chunks(text, &Stopwords::default())
}

/// Softmax cross-entropy and its gradient with respect to `scores`.
#[pyfunction]
fn ce_loss(scores: Vec<f64>, gold: usize) -> PyResult<(f64, Vec<f64>)> {
    core_ce_loss(&scores, gold).map_err(to_py)
}

/// End-to-end micro precision, recall and F1 as a dict.
#[pyfunction]
fn micro_f1(
    predictions: BTreeMap<String, Option<String>>,
    gold: BTreeMap<String, String>,
) -> PyResult<BTreeMap<String, f64>> {
    let r = core_micro_f1(&predictions, &gold, Setting::EndToEnd, None).map_err(to_py)?;
    Ok([
        ("precision".to_string(), r.precision),
        ("recall".to_string(), r.recall),
        ("f1".to_string(), r.f1),
    ]
    .into())
}

#[pymodule]
#[pyo3(name = "attrlink")]
fn attrlink_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", attrlink::VERSION)?;
    m.add_class::<PyEmbeddingStore>()?;
    m.add_function(wrap_pyfunction!(hash_embed, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_token, m)?)?;
    m.add_function(wrap_pyfunction!(noun_chunks, m)?)?;
    m.add_function(wrap_pyfunction!(ce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(micro_f1, m)?)?;
    Ok(())
}
