//! Token vectors and the bidirectional LSTM encoder.
//!
//! Contextual embeddings are produced outside this crate and read from an
//! embedding file; [`hashed_embeddings`] is a deterministic stand-in for tests
//! and synthetic runs. The encoder returns, per token, the concatenation of
//! the forward and backward hidden states, and exposes exact gradients for
//! every weight and for its inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use thiserror::Error;

use crate::corpus::{AnnotatedDocument, Token};
use crate::seed::{fnv1a, splitmix64};
use crate::tensor::{add_outer, sigmoid, uniform_matrix, uniform_vector, Parameters, TensorMut, TensorRef};

/// Rows are tokens, columns are `2 * hidden`: forward state then backward state.
pub type HiddenStates = Array2<f64>;

// ---------------------------------------------------------------------------
// Embedding files

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: dimension {found} differs from the file's dimension {expected}")]
    DimensionMismatch { line: usize, expected: usize, found: usize },
    #[error("{doc_id} sentence {sentence_index}: header declares {declared} rows but {found} follow")]
    RowCount { doc_id: String, sentence_index: usize, declared: usize, found: usize },
    #[error("{doc_id} sentence {sentence_index}: {found} embedding rows for {expected} tokens")]
    TokenCount { doc_id: String, sentence_index: usize, expected: usize, found: usize },
    #[error("{doc_id} sentence {sentence_index}: no embeddings")]
    MissingSentence { doc_id: String, sentence_index: usize },
    #[error("{doc_id} sentence {sentence_index}: embeddings given twice")]
    Duplicate { doc_id: String, sentence_index: usize },
}

/// Per-sentence `(n × d)` matrices keyed by `(doc_id, sentence_index)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub sentences: BTreeMap<(String, usize), Array2<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable { dim, sentences: BTreeMap::new() }
    }

    pub fn get(&self, doc_id: &str, sentence_index: usize) -> Option<&Array2<f64>> {
        self.sentences.get(&(doc_id.to_string(), sentence_index))
    }

    pub fn insert(&mut self, doc_id: &str, sentence_index: usize, matrix: Array2<f64>) {
        assert_eq!(matrix.ncols(), self.dim, "embedding dimension");
        self.sentences.insert((doc_id.to_string(), sentence_index), matrix);
    }

    /// Every sentence of every document must have exactly one row per token.
    pub fn check_against(&self, corpus: &[AnnotatedDocument]) -> Result<(), EmbeddingError> {
        for doc in corpus {
            for (si, sentence) in doc.document.sentences.iter().enumerate() {
                let m = self.get(doc.doc_id(), si).ok_or_else(|| EmbeddingError::MissingSentence {
                    doc_id: doc.doc_id().to_string(),
                    sentence_index: si,
                })?;
                if m.nrows() != sentence.len() {
                    return Err(EmbeddingError::TokenCount {
                        doc_id: doc.doc_id().to_string(),
                        sentence_index: si,
                        expected: sentence.len(),
                        found: m.nrows(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Text form: a `<doc_id> <sentence_index> <n> <d>` header then `n` rows
    /// of `d` floats per sentence. Floats are written in shortest round-trip
    /// form, so reading back is bit-exact.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for ((doc_id, si), m) in &self.sentences {
            let _ = writeln!(out, "{doc_id} {si} {} {}", m.nrows(), m.ncols());
            for row in m.rows() {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                out.push_str(&cells.join(" "));
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, EmbeddingError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
            .peekable();
        let mut dim: Option<usize> = None;
        let mut sentences = BTreeMap::new();

        while let Some((line, header)) = lines.next() {
            let fields: Vec<&str> = header.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(EmbeddingError::Malformed {
                    line,
                    message: format!("expected `<doc_id> <sentence_index> <n> <d>`, got {header:?}"),
                });
            }
            let num = |s: &str, what: &str| {
                s.parse::<usize>()
                    .map_err(|_| EmbeddingError::Malformed { line, message: format!("bad {what} {s:?}") })
            };
            let doc_id = fields[0].to_string();
            let sentence_index = num(fields[1], "sentence index")?;
            let n = num(fields[2], "row count")?;
            let d = num(fields[3], "dimension")?;
            if d == 0 {
                return Err(EmbeddingError::Malformed { line, message: "dimension must be positive".into() });
            }
            match dim {
                Some(expected) if expected != d => {
                    return Err(EmbeddingError::DimensionMismatch { line, expected, found: d })
                }
                _ => dim = Some(d),
            }

            let mut values = Vec::with_capacity(n * d);
            for found in 0..n {
                let row: Option<Vec<f64>> = lines.peek().and_then(|(_, l)| {
                    let cells: Vec<&str> = l.split_whitespace().collect();
                    if cells.len() != d {
                        return None;
                    }
                    cells.iter().map(|c| c.parse::<f64>().ok()).collect()
                });
                match row {
                    Some(row) => {
                        values.extend(row);
                        lines.next();
                    }
                    None => {
                        return Err(EmbeddingError::RowCount { doc_id, sentence_index, declared: n, found })
                    }
                }
            }
            let matrix = Array2::from_shape_vec((n, d), values).expect("row-major shape");
            if sentences.insert((doc_id.clone(), sentence_index), matrix).is_some() {
                return Err(EmbeddingError::Duplicate { doc_id, sentence_index });
            }
        }
        Ok(EmbeddingTable { dim: dim.unwrap_or(1), sentences })
    }

    pub fn write_file(&self, path: &Path) -> Result<(), EmbeddingError> {
        std::fs::write(path, self.to_text())
            .map_err(|source| EmbeddingError::Io { path: path.display().to_string(), source })
    }
}

pub fn load_embedding_file(path: &Path) -> Result<EmbeddingTable, EmbeddingError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| EmbeddingError::Io { path: path.display().to_string(), source })?;
    EmbeddingTable::from_text(&text)
}

fn unit_interval(x: u64) -> f64 {
    (x >> 11) as f64 / (1u64 << 53) as f64
}

/// Deterministic pseudo-embeddings: each lowercased token string maps to a
/// fixed vector in `[-1, 1]^d` for a given seed.
pub fn hashed_embeddings(tokens: &[Token], dim: usize, seed: u64) -> Array2<f64> {
    assert!(dim >= 1, "embedding dimension must be positive");
    let mut m = Array2::zeros((tokens.len(), dim));
    for (row, token) in m.rows_mut().into_iter().zip(tokens) {
        let mut state = fnv1a(token.text.to_lowercase().as_bytes()) ^ splitmix64(seed);
        for v in row {
            state = splitmix64(state);
            *v = 2.0 * unit_interval(state) - 1.0;
        }
    }
    m
}

/// Hashed embeddings for every sentence of a corpus.
pub fn hashed_table(corpus: &[AnnotatedDocument], dim: usize, seed: u64) -> EmbeddingTable {
    let mut table = EmbeddingTable::new(dim);
    for doc in corpus {
        for (si, sentence) in doc.document.sentences.iter().enumerate() {
            table.insert(doc.doc_id(), si, hashed_embeddings(sentence, dim, seed));
        }
    }
    table
}

// ---------------------------------------------------------------------------
// Bidirectional LSTM

/// One direction. Gate blocks are stacked `[input; forget; candidate; output]`,
/// each `hidden` rows tall.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights {
    pub input: Array2<f64>,
    pub recurrent: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LstmWeights {
    fn zeros(input_dim: usize, hidden: usize) -> Self {
        LstmWeights {
            input: Array2::zeros((4 * hidden, input_dim)),
            recurrent: Array2::zeros((4 * hidden, hidden)),
            bias: Array1::zeros(4 * hidden),
        }
    }

    fn init(rng: &mut impl Rng, input_dim: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        LstmWeights {
            input: uniform_matrix(rng, 4 * hidden, input_dim, bound),
            recurrent: uniform_matrix(rng, 4 * hidden, hidden, bound),
            bias: uniform_vector(rng, 4 * hidden, bound),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub input_dim: usize,
    pub hidden: usize,
    pub forward: LstmWeights,
    pub backward: LstmWeights,
}

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("input has {found} columns, encoder expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite input at token {row}, column {col}")]
    NonFinite { row: usize, col: usize },
}

impl EncoderParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        EncoderParams {
            input_dim,
            hidden,
            forward: LstmWeights::zeros(input_dim, hidden),
            backward: LstmWeights::zeros(input_dim, hidden),
        }
    }

    /// Uniform in `[-1/sqrt(hidden), 1/sqrt(hidden)]`.
    pub fn init(rng: &mut impl Rng, input_dim: usize, hidden: usize) -> Self {
        let forward = LstmWeights::init(rng, input_dim, hidden);
        let backward = LstmWeights::init(rng, input_dim, hidden);
        EncoderParams { input_dim, hidden, forward, backward }
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams::zeros(self.input_dim, self.hidden)
    }

    /// The same encoder with its directions exchanged.
    pub fn swapped(&self) -> Self {
        EncoderParams {
            input_dim: self.input_dim,
            hidden: self.hidden,
            forward: self.backward.clone(),
            backward: self.forward.clone(),
        }
    }
}

impl Parameters for EncoderParams {
    fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out = Vec::with_capacity(6);
        for (dir, w) in [("fwd", &self.forward), ("bwd", &self.backward)] {
            out.push((format!("encoder.{dir}.input"), TensorRef::Matrix(&w.input)));
            out.push((format!("encoder.{dir}.recurrent"), TensorRef::Matrix(&w.recurrent)));
            out.push((format!("encoder.{dir}.bias"), TensorRef::Vector(&w.bias)));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        let mut out = Vec::with_capacity(6);
        for (dir, w) in [("fwd", &mut self.forward), ("bwd", &mut self.backward)] {
            out.push((format!("encoder.{dir}.input"), TensorMut::Matrix(&mut w.input)));
            out.push((format!("encoder.{dir}.recurrent"), TensorMut::Matrix(&mut w.recurrent)));
            out.push((format!("encoder.{dir}.bias"), TensorMut::Vector(&mut w.bias)));
        }
        out
    }
}

struct Step {
    token: usize,
    gates: Array1<f64>, // activated i, f, g, o
    cell: Array1<f64>,
    cell_prev: Array1<f64>,
    hidden_prev: Array1<f64>,
    tanh_cell: Array1<f64>,
}

/// Forward-pass record needed for backpropagation.
pub struct EncoderCache {
    inputs: Array2<f64>,
    forward: Vec<Step>,
    backward: Vec<Step>,
}

fn run_direction(w: &LstmWeights, x: ArrayView2<'_, f64>, order: impl Iterator<Item = usize>, hidden: usize) -> Vec<Step> {
    let mut h = Array1::<f64>::zeros(hidden);
    let mut c = Array1::<f64>::zeros(hidden);
    let mut steps = Vec::new();
    for t in order {
        let mut z = w.input.dot(&x.row(t)) + w.recurrent.dot(&h) + &w.bias;
        for (k, v) in z.iter_mut().enumerate() {
            *v = if (2 * hidden..3 * hidden).contains(&k) { v.tanh() } else { sigmoid(*v) };
        }
        let (i, f, g, o) = gate_views(&z, hidden);
        let cell = &f * &c + &i * &g;
        let tanh_cell = cell.mapv(f64::tanh);
        let h_new = &o * &tanh_cell;
        steps.push(Step { token: t, gates: z.clone(), cell: cell.clone(), cell_prev: c, hidden_prev: h, tanh_cell });
        h = h_new;
        c = cell;
    }
    steps
}

fn gate_views(z: &Array1<f64>, h: usize) -> (ArrayView1<'_, f64>, ArrayView1<'_, f64>, ArrayView1<'_, f64>, ArrayView1<'_, f64>) {
    (z.slice(s![0..h]), z.slice(s![h..2 * h]), z.slice(s![2 * h..3 * h]), z.slice(s![3 * h..4 * h]))
}

fn check_input(x: &ArrayView2<'_, f64>, params: &EncoderParams) -> Result<(), EncoderError> {
    if x.ncols() != params.input_dim {
        return Err(EncoderError::DimensionMismatch { expected: params.input_dim, found: x.ncols() });
    }
    if let Some(((row, col), _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(EncoderError::NonFinite { row, col });
    }
    Ok(())
}

pub fn encode(embeddings: ArrayView2<'_, f64>, params: &EncoderParams) -> Result<HiddenStates, EncoderError> {
    encode_with_cache(embeddings, params).map(|(h, _)| h)
}

pub fn encode_with_cache(
    embeddings: ArrayView2<'_, f64>,
    params: &EncoderParams,
) -> Result<(HiddenStates, EncoderCache), EncoderError> {
    check_input(&embeddings, params)?;
    let n = embeddings.nrows();
    let hsz = params.hidden;
    let forward = run_direction(&params.forward, embeddings, 0..n, hsz);
    let backward = run_direction(&params.backward, embeddings, (0..n).rev(), hsz);
    let mut out = Array2::zeros((n, 2 * hsz));
    for step in &forward {
        let h = gate_views(&step.gates, hsz).3.to_owned() * &step.tanh_cell;
        out.slice_mut(s![step.token, 0..hsz]).assign(&h);
    }
    for step in &backward {
        let h = gate_views(&step.gates, hsz).3.to_owned() * &step.tanh_cell;
        out.slice_mut(s![step.token, hsz..2 * hsz]).assign(&h);
    }
    Ok((out, EncoderCache { inputs: embeddings.to_owned(), forward, backward }))
}

fn backprop_direction(
    w: &LstmWeights,
    grads: &mut LstmWeights,
    steps: &[Step],
    d_out: ArrayView2<'_, f64>,
    inputs: &Array2<f64>,
    d_inputs: &mut Array2<f64>,
    hidden: usize,
) {
    let mut dh_next = Array1::<f64>::zeros(hidden);
    let mut dc_next = Array1::<f64>::zeros(hidden);
    for step in steps.iter().rev() {
        let (i, f, g, o) = gate_views(&step.gates, hidden);
        let dh = &d_out.row(step.token) + &dh_next;
        let d_o = &dh * &step.tanh_cell;
        let dc = &dc_next + &(&dh * &o * &step.tanh_cell.mapv(|t| 1.0 - t * t));
        let d_i = &dc * &g;
        let d_g = &dc * &i;
        let d_f = &dc * &step.cell_prev;
        dc_next = &dc * &f;

        let mut dz = Array1::<f64>::zeros(4 * hidden);
        for k in 0..hidden {
            dz[k] = d_i[k] * i[k] * (1.0 - i[k]);
            dz[hidden + k] = d_f[k] * f[k] * (1.0 - f[k]);
            dz[2 * hidden + k] = d_g[k] * (1.0 - g[k] * g[k]);
            dz[3 * hidden + k] = d_o[k] * o[k] * (1.0 - o[k]);
        }
        let x = inputs.row(step.token);
        add_outer(&mut grads.input, &dz, x);
        add_outer(&mut grads.recurrent, &dz, step.hidden_prev.view());
        grads.bias += &dz;
        let dx = w.input.t().dot(&dz);
        d_inputs.row_mut(step.token).scaled_add(1.0, &dx);
        dh_next = w.recurrent.t().dot(&dz);
        debug_assert_eq!(step.cell.len(), hidden);
    }
}

/// Accumulates parameter gradients into `grads` and returns the gradient with
/// respect to the input embeddings.
pub fn backward(
    params: &EncoderParams,
    cache: &EncoderCache,
    d_hidden: ArrayView2<'_, f64>,
    grads: &mut EncoderParams,
) -> Array2<f64> {
    let hsz = params.hidden;
    let mut d_inputs = Array2::zeros(cache.inputs.raw_dim());
    backprop_direction(
        &params.forward,
        &mut grads.forward,
        &cache.forward,
        d_hidden.slice(s![.., 0..hsz]),
        &cache.inputs,
        &mut d_inputs,
        hsz,
    );
    backprop_direction(
        &params.backward,
        &mut grads.backward,
        &cache.backward,
        d_hidden.slice(s![.., hsz..2 * hsz]),
        &cache.inputs,
        &mut d_inputs,
        hsz,
    );
    d_inputs
}

/// Row-reverses a matrix.
pub fn reverse_rows(m: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = m.to_owned();
    out.invert_axis(Axis(0));
    out.as_standard_layout().to_owned()
}
