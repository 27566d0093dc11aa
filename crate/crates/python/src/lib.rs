//! Python bindings: documents and standoff I/O, scoring, the trained
//! extractor and the prediction statistics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use clinevent::corpus::{self, AnnotatedDocument, TokenSpan};
use clinevent::encoder::{self, EmbeddingTable};
use clinevent::prediction::{self, NoteLabel, PatientTimeline, TestRecord, TestResult};
use clinevent::schema::{self, Schema};
use clinevent::scoring::{self, TriggerMatchMode};
use clinevent::spanmodel;
use clinevent::synthetic::{self, SyntheticSpec};

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

type PySpan = (usize, usize, usize);

fn span_tuple(s: &TokenSpan) -> PySpan {
    (s.sentence_index, s.start, s.end)
}

/// An annotated note.
#[pyclass(name = "Document", module = "pyclinevent", frozen)]
struct PyDocument {
    inner: AnnotatedDocument,
}

#[pymethods]
impl PyDocument {
    /// A document without annotations.
    #[new]
    fn new(doc_id: &str, text: &str) -> Self {
        PyDocument { inner: AnnotatedDocument::unannotated(corpus::Document::new(doc_id, text)) }
    }

    #[staticmethod]
    fn from_standoff(doc_id: &str, txt: &str, ann: &str) -> PyResult<Self> {
        corpus::parse_standoff(doc_id, txt, ann).map(|inner| PyDocument { inner }).map_err(value_error)
    }

    /// `(txt, ann)` file contents.
    fn to_standoff(&self) -> (String, String) {
        corpus::serialize_standoff(&self.inner)
    }

    #[getter]
    fn doc_id(&self) -> &str {
        self.inner.doc_id()
    }

    #[getter]
    fn text(&self) -> &str {
        &self.inner.document.text
    }

    /// Token texts per sentence.
    #[getter]
    fn sentences(&self) -> Vec<Vec<String>> {
        self.inner.document.sentences.iter().map(|s| s.iter().map(|t| t.text.clone()).collect()).collect()
    }

    /// Events as dicts with `type`, `trigger`, `trigger_text`, `labeled` and
    /// `span_only`; spans are `(sentence, start, end)` token offsets.
    #[getter]
    fn events<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner
            .events
            .iter()
            .map(|e| {
                let d = PyDict::new(py);
                d.set_item("type", e.event_type())?;
                d.set_item("trigger", span_tuple(&e.trigger.span))?;
                d.set_item("trigger_text", self.inner.trigger_text(e))?;
                let labeled: Vec<(String, PySpan, String)> =
                    e.labeled_args.iter().map(|a| (a.arg_type.clone(), span_tuple(&a.span), a.subtype.clone())).collect();
                d.set_item("labeled", labeled)?;
                let span_only: Vec<(String, PySpan)> =
                    e.span_only_args.iter().map(|a| (a.arg_type.clone(), span_tuple(&a.span))).collect();
                d.set_item("span_only", span_only)?;
                Ok(d)
            })
            .collect()
    }

    /// Schema violations as `(event index, message)` pairs.
    #[pyo3(signature = (schema_json = None))]
    fn validate(&self, schema_json: Option<&str>) -> PyResult<Vec<(usize, String)>> {
        let schema = load(schema_json)?;
        Ok(self
            .inner
            .events
            .iter()
            .enumerate()
            .flat_map(|(i, e)| schema::validate_event(e, &schema).into_iter().map(move |v| (i, v.to_string())))
            .collect())
    }

    /// Copy with multi-token COVID triggers cut to their first token.
    fn truncate_covid_triggers(&self) -> Self {
        PyDocument { inner: schema::truncate_covid_triggers(&self.inner) }
    }

    fn __len__(&self) -> usize {
        self.inner.events.len()
    }

    fn __repr__(&self) -> String {
        format!("Document({:?}, {} events)", self.inner.doc_id(), self.inner.events.len())
    }
}

fn load(schema_json: Option<&str>) -> PyResult<Schema> {
    match schema_json {
        Some(text) => schema::load_schema(text).map_err(value_error),
        None => Ok(Schema::default()),
    }
}

fn documents(docs: &[PyRef<'_, PyDocument>]) -> Vec<AnnotatedDocument> {
    docs.iter().map(|d| d.inner.clone()).collect()
}

fn parse_mode(mode: &str) -> PyResult<TriggerMatchMode> {
    mode.parse().map_err(value_error)
}

#[pyclass(name = "ScoreReport", module = "pyclinevent", frozen)]
struct PyScoreReport {
    inner: scoring::ScoreReport,
}

#[pymethods]
impl PyScoreReport {
    /// `(slot, tp, fp, fn, precision, recall, f1)` rows.
    fn rows(&self) -> Vec<(String, usize, usize, usize, f64, f64, f64)> {
        self.inner
            .rows()
            .into_iter()
            .map(|r| (r.slot, r.counts.tp, r.counts.fp, r.counts.fn_, r.prf.precision, r.prf.recall, r.prf.f1))
            .collect()
    }

    #[getter]
    fn trigger_f1(&self) -> f64 {
        self.inner.all_triggers().prf().f1
    }

    #[getter]
    fn labeled_f1(&self) -> f64 {
        self.inner.all_labeled().prf().f1
    }

    fn to_tsv(&self) -> String {
        self.inner.to_tsv()
    }

    fn __str__(&self) -> String {
        self.inner.to_pretty()
    }
}

/// Slot-filling scores of predicted against gold documents.
#[pyfunction]
#[pyo3(signature = (gold, pred, mode = "exact"))]
fn score(gold: Vec<PyRef<'_, PyDocument>>, pred: Vec<PyRef<'_, PyDocument>>, mode: &str) -> PyResult<PyScoreReport> {
    let inner = scoring::score_documents(&documents(&gold), &documents(&pred), parse_mode(mode)?).map_err(value_error)?;
    Ok(PyScoreReport { inner })
}

#[pyfunction]
fn agreement(a: Vec<PyRef<'_, PyDocument>>, b: Vec<PyRef<'_, PyDocument>>) -> PyResult<PyScoreReport> {
    let inner = scoring::agreement_report(&documents(&a), &documents(&b)).map_err(value_error)?;
    Ok(PyScoreReport { inner })
}

/// `(precision, recall, f1)`.
#[pyfunction]
#[pyo3(name = "prf")]
fn py_prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = scoring::prf(tp, fp, fn_);
    (p.precision, p.recall, p.f1)
}

/// Sentences as lists of `(text, char_start, char_end)`.
#[pyfunction]
fn tokenize(text: &str) -> Vec<Vec<(String, usize, usize)>> {
    corpus::tokenize(text)
        .into_iter()
        .map(|s| s.into_iter().map(|t| (t.text, t.char_start, t.char_end)).collect())
        .collect()
}

#[pyfunction]
fn enumerate_spans(n: usize, max_width: usize) -> PyResult<Vec<(usize, usize)>> {
    if max_width == 0 {
        return Err(value_error("max_width must be positive"));
    }
    Ok(spanmodel::enumerate_spans(n, max_width).spans.into_iter().map(|s| (s.start, s.end)).collect())
}

/// Deterministic per-token vectors in [-1, 1] for one sentence of text.
#[pyfunction]
fn hashed_embeddings(sentence: &str, dim: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    if dim == 0 {
        return Err(value_error("dim must be positive"));
    }
    let tokens: Vec<corpus::Token> = corpus::tokenize(sentence).into_iter().flatten().collect();
    Ok(encoder::hashed_embeddings(&tokens, dim, seed).outer_iter().map(|r| r.to_vec()).collect())
}

#[pyclass(name = "EmbeddingTable", module = "pyclinevent", frozen)]
struct PyEmbeddingTable {
    inner: EmbeddingTable,
}

#[pymethods]
impl PyEmbeddingTable {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        encoder::load_embedding_file(&path).map(|inner| PyEmbeddingTable { inner }).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn hashed(docs: Vec<PyRef<'_, PyDocument>>, dim: usize, seed: u64) -> PyResult<Self> {
        if dim == 0 {
            return Err(value_error("dim must be positive"));
        }
        Ok(PyEmbeddingTable { inner: encoder::hashed_table(&documents(&docs), dim, seed) })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }
}

/// A trained extractor checkpoint.
#[pyclass(name = "SpanModel", module = "pyclinevent", frozen)]
struct PySpanModel {
    inner: spanmodel::SpanModel,
}

#[pymethods]
impl PySpanModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        spanmodel::SpanModel::load(&path).map(|inner| PySpanModel { inner }).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    /// Trains on `docs` with a JSON model config (defaults when omitted).
    #[staticmethod]
    #[pyo3(signature = (docs, embeddings, config_json = None))]
    fn train(docs: Vec<PyRef<'_, PyDocument>>, embeddings: &PyEmbeddingTable, config_json: Option<&str>) -> PyResult<Self> {
        let config: spanmodel::ModelConfig = match config_json {
            Some(text) => spanmodel::ModelConfig::from_json(text).map_err(value_error)?,
            None => spanmodel::ModelConfig::default(),
        };
        let (inner, _) = spanmodel::train(&documents(&docs), &embeddings.inner, &Schema::default(), &config, None)
            .map_err(value_error)?;
        Ok(PySpanModel { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    /// The document with predicted events in place of its annotations.
    fn extract(&self, doc: &PyDocument, embeddings: &PyEmbeddingTable) -> PyResult<PyDocument> {
        let inner = self.inner.extract(&doc.inner, &embeddings.inner, &Schema::default()).map_err(value_error)?;
        Ok(PyDocument { inner })
    }
}

/// Exact trapezoid AUC.
#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    check_lengths(&scores, &labels)?;
    prediction::roc_auc(&scores, &labels).map(|c| c.auc).map_err(value_error)
}

/// ROC points as `(threshold, fpr, tpr)`, from the strictest threshold.
#[pyfunction]
fn roc_curve(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<Vec<(f64, f64, f64)>> {
    check_lengths(&scores, &labels)?;
    let curve = prediction::roc_auc(&scores, &labels).map_err(value_error)?;
    Ok(curve.points.iter().map(|p| (p.threshold, p.fpr, p.tpr)).collect())
}

#[pyfunction]
#[pyo3(signature = (scores, labels, target_tpr = 0.8))]
fn fpr_at_tpr(scores: Vec<f64>, labels: Vec<bool>, target_tpr: f64) -> PyResult<f64> {
    check_lengths(&scores, &labels)?;
    let curve = prediction::roc_auc(&scores, &labels).map_err(value_error)?;
    Ok(prediction::fpr_at_tpr(&curve, target_tpr))
}

fn check_lengths(scores: &[f64], labels: &[bool]) -> PyResult<()> {
    if scores.len() != labels.len() {
        return Err(value_error(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    Ok(())
}

/// Welch two-sided t-test: `(t, p, df)`.
#[pyfunction]
fn ttest(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let t = prediction::two_sided_ttest(&a, &b).map_err(value_error)?;
    Ok((t.t, t.p, t.df))
}

/// Label of a note written at `note_time` given `(time, "positive" | "negative")` tests.
#[pyfunction]
fn assign_note_label(tests: Vec<(f64, String)>, note_time: f64) -> PyResult<&'static str> {
    let tests = tests
        .into_iter()
        .map(|(time, result)| {
            let result = match result.as_str() {
                "positive" => TestResult::Positive,
                "negative" => TestResult::Negative,
                other => return Err(value_error(format!("unknown test result {other:?}"))),
            };
            Ok(TestRecord { time, result })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let timeline = PatientTimeline { patient_id: String::new(), tests, notes: Vec::new(), observations: Vec::new() };
    Ok(match prediction::assign_note_label(&timeline, note_time) {
        NoteLabel::None => "none",
        NoteLabel::Positive => "positive",
        NoteLabel::Negative => "negative",
    })
}

/// Seeded synthetic annotated notes.
#[pyfunction]
#[pyo3(signature = (patients = 10, seed = 0))]
fn synthetic_corpus(patients: usize, seed: u64) -> Vec<PyDocument> {
    let data = synthetic::make_synthetic_corpus(&SyntheticSpec { patients, ..SyntheticSpec::default() }, seed);
    data.corpus.into_iter().map(|inner| PyDocument { inner }).collect()
}

#[pymodule]
fn pyclinevent(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDocument>()?;
    m.add_class::<PyScoreReport>()?;
    m.add_class::<PyEmbeddingTable>()?;
    m.add_class::<PySpanModel>()?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(agreement, m)?)?;
    m.add_function(wrap_pyfunction!(py_prf, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(enumerate_spans, m)?)?;
    m.add_function(wrap_pyfunction!(hashed_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(roc_curve, m)?)?;
    m.add_function(wrap_pyfunction!(fpr_at_tpr, m)?)?;
    m.add_function(wrap_pyfunction!(ttest, m)?)?;
    m.add_function(wrap_pyfunction!(assign_note_label, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
