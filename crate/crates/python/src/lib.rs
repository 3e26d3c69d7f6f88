//! Python bindings: tokenization, BM25 indexing and search, training,
//! re-ranking and evaluation.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use longrank::config::KvConfig;
use longrank::data::{Candidate, CandidateSet, Document, DocumentStore, Qrels, Query, QueryStore, RunEntry};
use longrank::model::{score_pair, ModelConfig, ModelParams};
use longrank::retrieval::{retrieve_topk, Bm25Params, InvertedIndex};
use longrank::tokenizer::{normalize, DocumentText, Vocabulary};
use longrank::training::{self, TrainInputs, TrainingConfig};
use longrank::Error;

type DocTuple = (String, String, String);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for longrank::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn doc_store(docs: Vec<DocTuple>) -> PyResult<DocumentStore> {
    let mut store = DocumentStore::new();
    for (doc_id, title, body) in docs {
        store
            .insert(Document {
                doc_id,
                url: String::new(),
                title,
                body,
            })
            .py()?;
    }
    Ok(store)
}

fn query_store(queries: Vec<(String, String)>) -> PyResult<QueryStore> {
    let mut store = QueryStore::new();
    for (query_id, text) in queries {
        store.insert(Query { query_id, text }).py()?;
    }
    Ok(store)
}

fn qrels_from(judgments: Vec<(String, String, u32)>) -> Qrels {
    let mut qrels = Qrels::new();
    for (q, d, g) in judgments {
        qrels.insert(&q, &d, g);
    }
    qrels
}

fn kv_from(values: Option<HashMap<String, Bound<'_, PyAny>>>) -> PyResult<KvConfig> {
    let mut kv = KvConfig::new();
    for (k, v) in values.unwrap_or_default() {
        let text = if let Ok(b) = v.extract::<bool>() {
            b.to_string()
        } else {
            v.str()?.to_string()
        };
        kv.set(&k, text);
    }
    Ok(kv)
}

fn parse_field(field: &str) -> PyResult<DocumentText> {
    match field {
        "title_body" => Ok(DocumentText::TitleBody),
        "body" => Ok(DocumentText::Body),
        "url_title_body" => Ok(DocumentText::UrlTitleBody),
        other => Err(PyValueError::new_err(format!("unknown field `{other}`"))),
    }
}

/// Lower-cased word tokens, as used by the index and the vocabulary.
#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    normalize(text)
}

/// Learning rate at a 0-based optimizer step under linear warmup and decay.
#[pyfunction]
#[pyo3(signature = (step, learning_rate=3e-5, warmup_steps=2500, total_steps=150_000))]
fn lr_at(step: usize, learning_rate: f64, warmup_steps: usize, total_steps: usize) -> PyResult<f64> {
    let config = TrainingConfig {
        learning_rate,
        warmup_steps,
        total_steps,
        ..TrainingConfig::default()
    };
    training::lr_at(step, &config).py()
}

#[pyfunction]
#[pyo3(signature = (ranked, relevant, cutoff=100))]
fn reciprocal_rank(ranked: Vec<String>, relevant: BTreeMap<String, u32>, cutoff: usize) -> PyResult<f64> {
    longrank::evaluation::reciprocal_rank(&ranked, Some(&relevant), cutoff).py()
}

/// Mean reciprocal rank of `run` (query id to ranked doc ids) over the
/// queries that have judgments.
#[pyfunction]
#[pyo3(signature = (run, qrels, cutoff=100))]
fn mrr(run: HashMap<String, Vec<String>>, qrels: Vec<(String, String, u32)>, cutoff: usize) -> PyResult<f64> {
    let entries: Vec<RunEntry> = run
        .into_iter()
        .flat_map(|(q, docs)| {
            docs.into_iter().enumerate().map(move |(i, doc_id)| RunEntry {
                query_id: q.clone(),
                doc_id,
                rank: i + 1,
                score: -(i as f64),
                run_tag: "py".into(),
            })
        })
        .collect();
    Ok(longrank::evaluation::evaluate_run(&entries, &qrels_from(qrels), cutoff).py()?.mrr)
}

/// BM25 inverted index.
#[pyclass(module = "longrank_py")]
struct Index {
    inner: InvertedIndex,
}

#[pymethods]
impl Index {
    /// `docs` is a list of `(doc_id, title, body)`.
    #[new]
    #[pyo3(signature = (docs, field="title_body"))]
    fn new(docs: Vec<DocTuple>, field: &str) -> PyResult<Self> {
        let store = doc_store(docs)?;
        Ok(Index {
            inner: InvertedIndex::build(&store, parse_field(field)?).py()?,
        })
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        Ok(Index {
            inner: InvertedIndex::load(dir).py()?,
        })
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        self.inner.save(dir).py()
    }

    #[getter]
    fn doc_count(&self) -> usize {
        self.inner.doc_count()
    }

    #[getter]
    fn avg_doc_length(&self) -> f64 {
        self.inner.avg_doc_length()
    }

    /// Top `k` `(doc_id, score)` pairs, best first.
    #[pyo3(signature = (query, k=100, k1=0.9, b=0.4))]
    fn search(&self, query: &str, k: usize, k1: f64, b: f64) -> PyResult<Vec<(String, f64)>> {
        let params = Bm25Params::new(k1, b).py()?;
        let set = retrieve_topk("q", query, &self.inner, &params, k);
        Ok(set.candidates.into_iter().map(|c| (c.doc_id, c.score)).collect())
    }

    fn __len__(&self) -> usize {
        self.inner.doc_count()
    }
}

/// Trained cross-encoder with its vocabulary.
#[pyclass(module = "longrank_py")]
struct Reranker {
    vocab: Vocabulary,
    params: ModelParams,
}

#[pymethods]
impl Reranker {
    /// Loads a checkpoint; `model.cfg` and `vocab.txt` are read from the
    /// same directory.
    #[staticmethod]
    fn load(checkpoint: &str) -> PyResult<Self> {
        let (vocab, params) = training::load_trained(checkpoint).py()?;
        Ok(Reranker { vocab, params })
    }

    fn save(&self, checkpoint: &str) -> PyResult<()> {
        self.params.save(checkpoint).py()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    #[getter]
    fn config(&self) -> String {
        self.params.config().to_kv().render()
    }

    /// Relevance probability of one (query, document) pair.
    #[pyo3(signature = (query, body, title=""))]
    fn score(&self, query: &str, body: &str, title: &str) -> PyResult<f64> {
        let q = Query {
            query_id: "q".into(),
            text: query.into(),
        };
        let d = Document {
            doc_id: "d".into(),
            url: String::new(),
            title: title.into(),
            body: body.into(),
        };
        score_pair(&q, &d, &self.vocab, &self.params).py()
    }

    /// Scores `(doc_id, title, body)` candidates and returns
    /// `(doc_id, probability)` pairs, best first.
    fn rerank(&self, query: &str, docs: Vec<DocTuple>) -> PyResult<Vec<(String, f64)>> {
        let q = Query {
            query_id: "q".into(),
            text: query.into(),
        };
        let candidates = CandidateSet {
            query_id: "q".into(),
            candidates: docs
                .iter()
                .map(|(id, _, _)| Candidate {
                    doc_id: id.clone(),
                    score: 0.0,
                })
                .collect(),
        };
        let store = doc_store(docs)?;
        let run = longrank::model::rerank(&q, &candidates, &store, &self.vocab, &self.params, "py").py()?;
        Ok(run.into_iter().map(|e| (e.doc_id, e.score)).collect())
    }
}

/// Trains a re-ranker.
///
/// `candidates` maps query ids to first-stage `(doc_id, score)` lists, best
/// first. `model_config` and `train_config` override the defaults by key.
/// Returns the model and the per-step training losses.
#[pyfunction]
#[pyo3(signature = (docs, queries, qrels, candidates, model_config=None, train_config=None, out_dir=None))]
fn train(
    docs: Vec<DocTuple>,
    queries: Vec<(String, String)>,
    qrels: Vec<(String, String, u32)>,
    candidates: HashMap<String, Vec<(String, f64)>>,
    model_config: Option<HashMap<String, Bound<'_, PyAny>>>,
    train_config: Option<HashMap<String, Bound<'_, PyAny>>>,
    out_dir: Option<String>,
) -> PyResult<(Reranker, Vec<f64>)> {
    let model = ModelConfig::default().with_overrides(&kv_from(model_config)?).py()?;
    let training_cfg = TrainingConfig::default().with_overrides(&kv_from(train_config)?).py()?;
    let docs = doc_store(docs)?;
    let queries = query_store(queries)?;
    let qrels = qrels_from(qrels);
    let candidates: BTreeMap<String, CandidateSet> = candidates
        .into_iter()
        .map(|(q, list)| {
            let set = CandidateSet {
                query_id: q.clone(),
                candidates: list.into_iter().map(|(doc_id, score)| Candidate { doc_id, score }).collect(),
            };
            (q, set)
        })
        .collect();
    for set in candidates.values() {
        set.validate().py()?;
    }
    let inputs = TrainInputs {
        docs: &docs,
        queries: &queries,
        qrels: &qrels,
        candidates: &candidates,
    };
    let outcome = training::train(&inputs, &model, &training_cfg, out_dir.as_deref().map(Path::new)).py()?;
    let losses = outcome.reports.iter().map(|r| r.loss).collect();
    Ok((
        Reranker {
            vocab: outcome.vocab,
            params: outcome.params,
        },
        losses,
    ))
}

/// Generated corpus with planted relevance.
#[pyclass(module = "longrank_py", get_all)]
struct SyntheticCorpus {
    docs: Vec<DocTuple>,
    queries: Vec<(String, String)>,
    qrels: Vec<(String, String, u32)>,
    train_queries: Vec<String>,
    held_out_queries: Vec<String>,
}

#[pyfunction]
#[pyo3(signature = (seed=0))]
fn synthetic(seed: u64) -> PyResult<SyntheticCorpus> {
    let c = longrank::synthetic::generate(&Default::default(), seed).py()?;
    let mut qrels = Vec::new();
    for q in c.qrels.query_ids() {
        for (d, g) in c.qrels.for_query(q).into_iter().flatten() {
            qrels.push((q.to_string(), d.clone(), *g));
        }
    }
    Ok(SyntheticCorpus {
        docs: c.docs.iter().map(|d| (d.doc_id.clone(), d.title.clone(), d.body.clone())).collect(),
        queries: c.queries.iter().map(|q| (q.query_id.clone(), q.text.clone())).collect(),
        qrels,
        train_queries: c.train_queries,
        held_out_queries: c.held_out_queries,
    })
}

#[pymodule]
fn longrank_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Index>()?;
    m.add_class::<Reranker>()?;
    m.add_class::<SyntheticCorpus>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(reciprocal_rank, m)?)?;
    m.add_function(wrap_pyfunction!(mrr, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic, m)?)?;
    Ok(())
}
