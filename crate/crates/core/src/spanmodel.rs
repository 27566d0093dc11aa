//! Span-based event extraction.
//!
//! Every token span up to a maximum width is a candidate. Each classifier
//! category (triggers, one per labeled argument type, one shared by all
//! span-only argument types) pools the encoder states of a span with its own
//! attention vector and scores the pooled vector with a small feed-forward
//! network. The top-K spans per category are kept, and for every argument
//! category a role classifier scores each (trigger, argument) pair of kept
//! spans. Decoding turns those scores into schema-valid [`Event`]s.
//!
//! All gradients are written by hand; see the tests for the finite-difference
//! checks that pin them down.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use log::{debug, info, warn};
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedDocument, Event, LabeledArg, SpanOnlyArg, TokenSpan};
use crate::encoder::{self, EmbeddingTable, EncoderCache, EncoderError, EncoderParams, HiddenStates};
use crate::schema::{validate_event, Schema};
use crate::scoring::{score_documents, TriggerMatchMode};
use crate::seed;
use crate::tensor::{log_sum_exp, softmax, uniform_matrix, uniform_vector, Parameters, TensorMut, TensorRef};

pub const NULL_LABEL: &str = "null";

#[derive(Debug, Error)]
pub enum SpanModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("non-finite attention score")]
    NonFiniteScore,
    #[error("non-finite loss at epoch {epoch} ({doc_id} sentence {sentence_index}): {loss}")]
    NonFiniteLoss { epoch: usize, doc_id: String, sentence_index: usize, loss: f64 },
    #[error("{doc_id} sentence {sentence_index}: no embeddings")]
    MissingEmbeddings { doc_id: String, sentence_index: usize },
    #[error("{doc_id} sentence {sentence_index}: {found} embedding rows for {expected} tokens")]
    TokenCount { doc_id: String, sentence_index: usize, expected: usize, found: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

// ---------------------------------------------------------------------------
// Spans

/// Sentence-local `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn width(&self) -> usize {
        self.end - self.start
    }

    pub fn from_token_span(span: &TokenSpan) -> Self {
        Span { start: span.start, end: span.end }
    }

    pub fn in_sentence(&self, sentence_index: usize) -> TokenSpan {
        TokenSpan::new(sentence_index, self.start, self.end)
    }
}

/// Every span of width `1..=max_width`, ordered by `(start, end)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanSet {
    pub max_width: usize,
    pub spans: Vec<Span>,
}

impl SpanSet {
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn index_of(&self, span: Span) -> Option<usize> {
        self.spans.binary_search(&span).ok()
    }
}

pub fn enumerate_spans(n: usize, max_width: usize) -> SpanSet {
    assert!(max_width >= 1, "maximum span width must be positive");
    let spans = (0..n)
        .flat_map(|start| (start + 1..=(start + max_width).min(n)).map(move |end| Span { start, end }))
        .collect();
    SpanSet { max_width, spans }
}

/// Softmax of the attention scores of one span.
pub fn attention_weights(scores: &[f64]) -> Result<Vec<f64>, SpanModelError> {
    assert!(!scores.is_empty(), "attention over an empty span");
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(SpanModelError::NonFiniteScore);
    }
    Ok(softmax(scores))
}

/// Attention-pooled representation of `span` given a category's attention vector.
pub fn span_representation(
    hidden: ArrayView2<'_, f64>,
    span: Span,
    attention: ArrayView1<'_, f64>,
) -> Result<Array1<f64>, SpanModelError> {
    let rows = hidden.slice(s![span.start..span.end, ..]);
    let alpha: Vec<f64> = rows.dot(&attention).to_vec();
    let weights = attention_weights(&alpha)?;
    Ok(pool(rows, &weights))
}

fn pool(rows: ArrayView2<'_, f64>, weights: &[f64]) -> Array1<f64> {
    let mut g = Array1::zeros(rows.ncols());
    for (row, w) in rows.rows().into_iter().zip(weights) {
        g.scaled_add(*w, &row);
    }
    g
}

// ---------------------------------------------------------------------------
// Label sets

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CategoryKind {
    Trigger,
    Labeled,
    SpanOnly,
}

/// One span classifier. `labels[0]` is always [`NULL_LABEL`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub name: String,
    pub kind: CategoryKind,
    pub labels: Vec<String>,
}

impl Category {
    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Category 0 scores triggers; every later category owns one role classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSets {
    pub categories: Vec<Category>,
}

impl LabelSets {
    pub fn from_schema(schema: &Schema) -> Self {
        let with_null = |names: Vec<String>| std::iter::once(NULL_LABEL.to_string()).chain(names).collect();
        let mut categories = vec![Category {
            name: "trigger".into(),
            kind: CategoryKind::Trigger,
            labels: with_null(schema.event_types.keys().cloned().collect()),
        }];
        for (name, subtypes) in schema.labeled_arguments() {
            categories.push(Category { name, kind: CategoryKind::Labeled, labels: with_null(subtypes) });
        }
        let span_only = schema.span_only_arguments();
        if !span_only.is_empty() {
            categories.push(Category { name: "span_only".into(), kind: CategoryKind::SpanOnly, labels: with_null(span_only) });
        }
        LabelSets { categories }
    }

    pub fn trigger(&self) -> &Category {
        &self.categories[0]
    }

    pub fn role_count(&self) -> usize {
        self.categories.len() - 1
    }

    /// Category and label index for a labeled argument.
    pub fn labeled_target(&self, arg_type: &str, subtype: &str) -> Option<(usize, usize)> {
        self.categories
            .iter()
            .position(|c| c.kind == CategoryKind::Labeled && c.name == arg_type)
            .and_then(|ci| self.categories[ci].label_index(subtype).map(|li| (ci, li)))
    }

    pub fn span_only_target(&self, arg_type: &str) -> Option<(usize, usize)> {
        self.categories
            .iter()
            .position(|c| c.kind == CategoryKind::SpanOnly)
            .and_then(|ci| self.categories[ci].label_index(arg_type).map(|li| (ci, li)))
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopK {
    Fixed(usize),
    /// `ceil(ratio * n)` for an `n`-token sentence.
    Ratio(f64),
}

impl TopK {
    pub fn resolve(&self, n_tokens: usize) -> usize {
        match *self {
            TopK::Fixed(k) => k.max(1),
            TopK::Ratio(r) => ((r * n_tokens as f64).ceil() as usize).max(1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub max_width: usize,
    pub top_k: TopK,
    pub hidden: usize,
    pub span_hidden: usize,
    pub role_hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Replace labeled-argument spans with their trigger span in training targets.
    pub substitute: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            max_width: 8,
            top_k: TopK::Ratio(0.4),
            hidden: 64,
            span_hidden: 64,
            role_hidden: 64,
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 8,
            seed: 0,
            optimizer: OptimizerKind::Sgd,
            substitute: true,
        }
    }
}

impl ModelConfig {
    /// Parses a JSON config (missing fields take defaults) and validates it.
    pub fn from_json(text: &str) -> Result<Self, SpanModelError> {
        let config: ModelConfig = serde_json::from_str(text).map_err(|e| SpanModelError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), SpanModelError> {
        let positive = [
            ("max_width", self.max_width),
            ("hidden", self.hidden),
            ("span_hidden", self.span_hidden),
            ("role_hidden", self.role_hidden),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(SpanModelError::Config(format!("{name} must be positive")));
        }
        match self.top_k {
            TopK::Fixed(0) => return Err(SpanModelError::Config("top_k must be at least 1".into())),
            TopK::Ratio(r) if !(r > 0.0 && r.is_finite()) => {
                return Err(SpanModelError::Config("top_k ratio must be positive".into()))
            }
            _ => {}
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(SpanModelError::Config("learning_rate must be finite and non-negative".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameters

/// `x -> output · relu(hidden_weight · x + hidden_bias)`; the output layer has no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffnn {
    pub hidden_weight: Array2<f64>,
    pub hidden_bias: Array1<f64>,
    pub output: Array2<f64>,
}

struct FfnnCache {
    pre: Array2<f64>,
    act: Array2<f64>,
    out: Array2<f64>,
}

impl Ffnn {
    fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Ffnn {
            hidden_weight: Array2::zeros((hidden, input)),
            hidden_bias: Array1::zeros(hidden),
            output: Array2::zeros((output, hidden)),
        }
    }

    fn init(rng: &mut impl Rng, input: usize, hidden: usize, output: usize) -> Self {
        Ffnn {
            hidden_weight: uniform_matrix(rng, hidden, input, 1.0 / (input as f64).sqrt()),
            hidden_bias: uniform_vector(rng, hidden, 0.1),
            output: uniform_matrix(rng, output, hidden, 1.0 / (hidden as f64).sqrt()),
        }
    }

    /// Row-wise over a batch.
    fn forward(&self, x: ArrayView2<'_, f64>) -> FfnnCache {
        let pre = x.dot(&self.hidden_weight.t()) + &self.hidden_bias;
        let act = pre.mapv(|v| v.max(0.0));
        let out = act.dot(&self.output.t());
        FfnnCache { pre, act, out }
    }

    fn apply(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        let act = (self.hidden_weight.dot(&x) + &self.hidden_bias).mapv(|v| v.max(0.0));
        self.output.dot(&act)
    }

    fn backward(&self, x: ArrayView2<'_, f64>, cache: &FfnnCache, d_out: &Array2<f64>, grads: &mut Ffnn) -> Array2<f64> {
        grads.output += &d_out.t().dot(&cache.act);
        let mut d_pre = d_out.dot(&self.output);
        d_pre.zip_mut_with(&cache.pre, |d, p| {
            if *p <= 0.0 {
                *d = 0.0
            }
        });
        grads.hidden_weight += &d_pre.t().dot(&x);
        grads.hidden_bias += &d_pre.sum_axis(Axis(0));
        d_pre.dot(&self.hidden_weight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpanHead {
    pub attention: Array1<f64>,
    pub ffnn: Ffnn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoleHead {
    pub ffnn: Ffnn,
}

/// Label scores of one pooled span vector.
pub fn span_scores(g: ArrayView1<'_, f64>, head: &SpanHead) -> Array1<f64> {
    head.ffnn.apply(g)
}

/// Two-way pairing scores `(not paired, paired)`.
pub fn role_scores(g_trigger: ArrayView1<'_, f64>, g_arg: ArrayView1<'_, f64>, head: &RoleHead) -> [f64; 2] {
    let mut x = Array1::zeros(g_trigger.len() + g_arg.len());
    x.slice_mut(s![..g_trigger.len()]).assign(&g_trigger);
    x.slice_mut(s![g_trigger.len()..]).assign(&g_arg);
    let out = head.ffnn.apply(x.view());
    [out[0], out[1]]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub span_heads: Vec<SpanHead>,
    pub role_heads: Vec<RoleHead>,
    category_names: Vec<String>,
}

impl ModelParams {
    pub fn zeros(input_dim: usize, config: &ModelConfig, labels: &LabelSets) -> Self {
        let width = 2 * config.hidden;
        ModelParams {
            encoder: EncoderParams::zeros(input_dim, config.hidden),
            span_heads: labels
                .categories
                .iter()
                .map(|c| SpanHead { attention: Array1::zeros(width), ffnn: Ffnn::zeros(width, config.span_hidden, c.labels.len()) })
                .collect(),
            role_heads: (0..labels.role_count())
                .map(|_| RoleHead { ffnn: Ffnn::zeros(2 * width, config.role_hidden, 2) })
                .collect(),
            category_names: labels.categories.iter().map(|c| c.name.clone()).collect(),
        }
    }

    pub fn init(rng: &mut impl Rng, input_dim: usize, config: &ModelConfig, labels: &LabelSets) -> Self {
        let width = 2 * config.hidden;
        let encoder = EncoderParams::init(rng, input_dim, config.hidden);
        let span_heads = labels
            .categories
            .iter()
            .map(|c| SpanHead {
                attention: uniform_vector(rng, width, 1.0 / (width as f64).sqrt()),
                ffnn: Ffnn::init(rng, width, config.span_hidden, c.labels.len()),
            })
            .collect();
        let role_heads = (0..labels.role_count())
            .map(|_| RoleHead { ffnn: Ffnn::init(rng, 2 * width, config.role_hidden, 2) })
            .collect();
        ModelParams {
            encoder,
            span_heads,
            role_heads,
            category_names: labels.categories.iter().map(|c| c.name.clone()).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }
}

fn ffnn_refs<'a>(prefix: &str, f: &'a Ffnn, out: &mut Vec<(String, TensorRef<'a>)>) {
    out.push((format!("{prefix}.hidden_weight"), TensorRef::Matrix(&f.hidden_weight)));
    out.push((format!("{prefix}.hidden_bias"), TensorRef::Vector(&f.hidden_bias)));
    out.push((format!("{prefix}.output"), TensorRef::Matrix(&f.output)));
}

fn ffnn_muts<'a>(prefix: &str, f: &'a mut Ffnn, out: &mut Vec<(String, TensorMut<'a>)>) {
    out.push((format!("{prefix}.hidden_weight"), TensorMut::Matrix(&mut f.hidden_weight)));
    out.push((format!("{prefix}.hidden_bias"), TensorMut::Vector(&mut f.hidden_bias)));
    out.push((format!("{prefix}.output"), TensorMut::Matrix(&mut f.output)));
}

impl Parameters for ModelParams {
    fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        let mut out = self.encoder.tensors();
        for (name, head) in self.category_names.iter().zip(&self.span_heads) {
            out.push((format!("span.{name}.attention"), TensorRef::Vector(&head.attention)));
            ffnn_refs(&format!("span.{name}"), &head.ffnn, &mut out);
        }
        for (name, head) in self.category_names[1..].iter().zip(&self.role_heads) {
            ffnn_refs(&format!("role.{name}"), &head.ffnn, &mut out);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, TensorMut<'_>)> {
        let mut out = self.encoder.tensors_mut();
        for (name, head) in self.category_names.iter().zip(&mut self.span_heads) {
            out.push((format!("span.{name}.attention"), TensorMut::Vector(&mut head.attention)));
            ffnn_muts(&format!("span.{name}"), &mut head.ffnn, &mut out);
        }
        for (name, head) in self.category_names[1..].iter().zip(&mut self.role_heads) {
            ffnn_muts(&format!("role.{name}"), &mut head.ffnn, &mut out);
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Top-K pruning

/// Indices (ascending) of the `k` spans whose best non-null score is
/// largest. Equal scores keep the earlier span.
pub fn prune_top_k(scores: ArrayView2<'_, f64>, k: usize) -> Vec<usize> {
    assert!(k >= 1, "K must be positive");
    assert!(scores.ncols() >= 2, "a classifier needs at least one non-null label");
    let best: Vec<f64> = scores
        .rows()
        .into_iter()
        .map(|r| r.slice(s![1..]).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let mut order: Vec<usize> = (0..best.len()).collect();
    order.sort_by(|&a, &b| best[b].total_cmp(&best[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

// ---------------------------------------------------------------------------
// Targets

/// Replaces every labeled argument's span with its trigger span.
pub fn substitute_trigger_spans(events: &[Event]) -> Vec<Event> {
    events
        .iter()
        .map(|e| {
            let mut e = e.clone();
            for arg in &mut e.labeled_args {
                arg.span = e.trigger.span;
            }
            e
        })
        .collect()
}

/// Gold labels for one sentence. Spans without an entry are null.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SentenceTargets {
    pub span_labels: Vec<BTreeMap<Span, usize>>,
    /// Per role classifier: gold (trigger span, argument span) pairs.
    pub role_pairs: Vec<BTreeSet<(Span, Span)>>,
}

impl SentenceTargets {
    pub fn label(&self, category: usize, span: Span) -> usize {
        self.span_labels[category].get(&span).copied().unwrap_or(0)
    }
}

/// Targets for the events of one sentence. When two annotations claim the
/// same span in the same classifier, the first one wins.
pub fn build_targets<'a>(events: impl IntoIterator<Item = &'a Event>, labels: &LabelSets, max_width: usize) -> SentenceTargets {
    let mut targets = SentenceTargets {
        span_labels: vec![BTreeMap::new(); labels.categories.len()],
        role_pairs: vec![BTreeSet::new(); labels.role_count()],
    };
    let claim = |targets: &mut SentenceTargets, category: usize, span: Span, label: usize, what: &str| -> bool {
        if span.width() > max_width {
            warn!("{what} span {}..{} is wider than {max_width} tokens and cannot be predicted", span.start, span.end);
            return false;
        }
        let slot = targets.span_labels[category].entry(span).or_insert(label);
        if *slot != label {
            debug!("{what} span {}..{} already labeled; keeping the first label", span.start, span.end);
        }
        true
    };
    for event in events {
        let trigger = Span::from_token_span(&event.trigger.span);
        let Some(trigger_label) = labels.trigger().label_index(event.event_type()) else {
            warn!("event type {} is not in the label set", event.event_type());
            continue;
        };
        if !claim(&mut targets, 0, trigger, trigger_label, "trigger") {
            continue;
        }
        let labeled = event.labeled_args.iter().map(|a| (labels.labeled_target(&a.arg_type, &a.subtype), &a.span, &a.arg_type));
        let span_only = event.span_only_args.iter().map(|a| (labels.span_only_target(&a.arg_type), &a.span, &a.arg_type));
        for (target, span, name) in labeled.chain(span_only) {
            let Some((category, label)) = target else {
                warn!("argument {name} is not in the label set");
                continue;
            };
            let span = Span::from_token_span(span);
            if claim(&mut targets, category, span, label, name) {
                targets.role_pairs[category - 1].insert((trigger, span));
            }
        }
    }
    targets
}

/// `ln Σ exp(z) - z[target]`.
pub fn cross_entropy(scores: ArrayView1<'_, f64>, target: usize) -> f64 {
    let z = scores.to_vec();
    log_sum_exp(&z) - z[target]
}

fn cross_entropy_grad(scores: ArrayView1<'_, f64>, target: usize) -> Array1<f64> {
    let mut p = Array1::from(softmax(&scores.to_vec()));
    p[target] -= 1.0;
    p
}

// ---------------------------------------------------------------------------
// Forward pass

struct CategoryPass {
    weights: Vec<Vec<f64>>,
    reps: Array2<f64>,
    ffnn: FfnnCache,
}

struct RolePass {
    pairs: Vec<(usize, usize)>,
    input: Array2<f64>,
    ffnn: FfnnCache,
}

struct Pass {
    hidden: HiddenStates,
    encoder: EncoderCache,
    spans: SpanSet,
    categories: Vec<CategoryPass>,
    pruned: Vec<Vec<usize>>,
    roles: Vec<RolePass>,
}

/// Raw classifier outputs for one sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceScores {
    pub spans: SpanSet,
    /// Per category, `m × |labels|`.
    pub span_scores: Vec<Array2<f64>>,
    /// Per category, kept span indices (ascending).
    pub pruned: Vec<Vec<usize>>,
    /// Per role classifier, scores keyed by (trigger span index, argument span index).
    pub role_scores: Vec<BTreeMap<(usize, usize), [f64; 2]>>,
}

fn forward(params: &ModelParams, config: &ModelConfig, x: ArrayView2<'_, f64>) -> Result<Pass, SpanModelError> {
    let (hidden, encoder_cache) = encoder::encode_with_cache(x, &params.encoder)?;
    let n = hidden.nrows();
    let spans = enumerate_spans(n, config.max_width);
    let width = hidden.ncols();
    let k = config.top_k.resolve(n);

    let mut categories = Vec::with_capacity(params.span_heads.len());
    for head in &params.span_heads {
        let alpha = hidden.dot(&head.attention);
        let mut reps = Array2::zeros((spans.len(), width));
        let mut weights = Vec::with_capacity(spans.len());
        for (i, span) in spans.spans.iter().enumerate() {
            let a = attention_weights(&alpha.as_slice().expect("contiguous")[span.start..span.end])?;
            reps.row_mut(i).assign(&pool(hidden.slice(s![span.start..span.end, ..]), &a));
            weights.push(a);
        }
        let ffnn = head.ffnn.forward(reps.view());
        categories.push(CategoryPass { weights, reps, ffnn });
    }
    let pruned: Vec<Vec<usize>> = if spans.is_empty() {
        vec![Vec::new(); categories.len()]
    } else {
        categories.iter().map(|c| prune_top_k(c.ffnn.out.view(), k)).collect()
    };

    let mut roles = Vec::with_capacity(params.role_heads.len());
    for (r, head) in params.role_heads.iter().enumerate() {
        let arg_cat = r + 1;
        let pairs: Vec<(usize, usize)> =
            pruned[0].iter().flat_map(|&j| pruned[arg_cat].iter().map(move |&k| (j, k))).collect();
        let mut input = Array2::zeros((pairs.len(), 2 * width));
        for (p, &(j, k)) in pairs.iter().enumerate() {
            input.slice_mut(s![p, ..width]).assign(&categories[0].reps.row(j));
            input.slice_mut(s![p, width..]).assign(&categories[arg_cat].reps.row(k));
        }
        let ffnn = head.ffnn.forward(input.view());
        roles.push(RolePass { pairs, input, ffnn });
    }
    Ok(Pass { hidden, encoder: encoder_cache, spans, categories, pruned, roles })
}

impl Pass {
    fn scores(&self) -> SentenceScores {
        SentenceScores {
            spans: self.spans.clone(),
            span_scores: self.categories.iter().map(|c| c.ffnn.out.clone()).collect(),
            pruned: self.pruned.clone(),
            role_scores: self
                .roles
                .iter()
                .map(|r| {
                    r.pairs
                        .iter()
                        .zip(r.ffnn.out.rows())
                        .map(|(&pair, row)| (pair, [row[0], row[1]]))
                        .collect()
                })
                .collect(),
        }
    }

    fn role_target(&self, targets: &SentenceTargets, role: usize, pair: (usize, usize)) -> usize {
        let key = (self.spans.spans[pair.0], self.spans.spans[pair.1]);
        usize::from(targets.role_pairs[role].contains(&key))
    }

    fn loss(&self, targets: &SentenceTargets) -> f64 {
        let mut total = 0.0;
        for (c, cat) in self.categories.iter().enumerate() {
            for (i, span) in self.spans.spans.iter().enumerate() {
                total += cross_entropy(cat.ffnn.out.row(i), targets.label(c, *span));
            }
        }
        for (r, role) in self.roles.iter().enumerate() {
            for (p, &pair) in role.pairs.iter().enumerate() {
                total += cross_entropy(role.ffnn.out.row(p), self.role_target(targets, r, pair));
            }
        }
        total
    }

    fn backward(&self, params: &ModelParams, targets: &SentenceTargets, grads: &mut ModelParams) {
        let width = self.hidden.ncols();
        let mut d_reps: Vec<Array2<f64>> = self.categories.iter().map(|c| Array2::zeros(c.reps.raw_dim())).collect();

        for (r, role) in self.roles.iter().enumerate() {
            if role.pairs.is_empty() {
                continue;
            }
            let mut d_out = Array2::zeros(role.ffnn.out.raw_dim());
            for (p, &pair) in role.pairs.iter().enumerate() {
                let target = self.role_target(targets, r, pair);
                d_out.row_mut(p).assign(&cross_entropy_grad(role.ffnn.out.row(p), target));
            }
            let d_input = params.role_heads[r].ffnn.backward(role.input.view(), &role.ffnn, &d_out, &mut grads.role_heads[r].ffnn);
            for (p, &(j, k)) in role.pairs.iter().enumerate() {
                d_reps[0].row_mut(j).scaled_add(1.0, &d_input.slice(s![p, ..width]));
                d_reps[r + 1].row_mut(k).scaled_add(1.0, &d_input.slice(s![p, width..]));
            }
        }

        let mut d_hidden = Array2::zeros(self.hidden.raw_dim());
        for (c, cat) in self.categories.iter().enumerate() {
            let head = &params.span_heads[c];
            let mut d_out = Array2::zeros(cat.ffnn.out.raw_dim());
            for (i, span) in self.spans.spans.iter().enumerate() {
                d_out.row_mut(i).assign(&cross_entropy_grad(cat.ffnn.out.row(i), targets.label(c, *span)));
            }
            let d_from_scores = head.ffnn.backward(cat.reps.view(), &cat.ffnn, &d_out, &mut grads.span_heads[c].ffnn);
            d_reps[c] += &d_from_scores;

            // pooled g = Σ a_t h_t with a = softmax(h_t · attention) over the span
            let mut d_alpha = Array1::<f64>::zeros(self.hidden.nrows());
            for (i, span) in self.spans.spans.iter().enumerate() {
                let dg = d_reps[c].row(i);
                let a = &cat.weights[i];
                let da: Vec<f64> = (span.start..span.end).map(|t| dg.dot(&self.hidden.row(t))).collect();
                let mean: f64 = a.iter().zip(&da).map(|(w, d)| w * d).sum();
                for (offset, t) in (span.start..span.end).enumerate() {
                    d_hidden.row_mut(t).scaled_add(a[offset], &dg);
                    d_alpha[t] += a[offset] * (da[offset] - mean);
                }
            }
            grads.span_heads[c].attention += &self.hidden.t().dot(&d_alpha);
            for (t, da) in d_alpha.iter().enumerate() {
                d_hidden.row_mut(t).scaled_add(*da, &head.attention);
            }
        }
        encoder::backward(&params.encoder, &self.encoder, d_hidden.view(), &mut grads.encoder);
    }
}

// ---------------------------------------------------------------------------
// Decoding

fn argmax(row: ArrayView1<'_, f64>) -> usize {
    row.iter().enumerate().fold(0, |best, (i, v)| if *v > row[best] { i } else { best })
}

/// Turns classifier scores into events. Each argument goes to the
/// schema-compatible trigger with the largest positive pairing margin; an
/// event keeps at most one argument per labeled type. Events that fail
/// validation are dropped.
pub fn decode(scores: &SentenceScores, labels: &LabelSets, schema: &Schema, sentence_index: usize) -> Vec<Event> {
    let spans = &scores.spans.spans;
    let mut events: BTreeMap<usize, Event> = BTreeMap::new();
    for (i, row) in scores.span_scores[0].rows().into_iter().enumerate() {
        let label = argmax(row);
        if label != 0 {
            events.insert(i, Event::new(labels.trigger().labels[label].clone(), spans[i].in_sentence(sentence_index)));
        }
    }
    let pruned_triggers: Vec<usize> = scores.pruned[0].iter().copied().filter(|j| events.contains_key(j)).collect();

    let mut labeled_margin: BTreeMap<(usize, String), f64> = BTreeMap::new();
    for (r, role_scores) in scores.role_scores.iter().enumerate() {
        let category = &labels.categories[r + 1];
        for &k in &scores.pruned[r + 1] {
            let label = argmax(scores.span_scores[r + 1].row(k));
            if label == 0 {
                continue;
            }
            let name = &category.labels[label];
            let mut best: Option<(usize, f64)> = None;
            for &j in &pruned_triggers {
                let Some(def) = schema.event_type(events[&j].event_type()) else { continue };
                let compatible = match category.kind {
                    CategoryKind::Labeled => def.accepts_labeled(&category.name, name),
                    CategoryKind::SpanOnly => def.accepts_span_only(name),
                    CategoryKind::Trigger => false,
                };
                let Some(psi) = role_scores.get(&(j, k)) else { continue };
                let margin = psi[1] - psi[0];
                if compatible && margin > 0.0 && best.is_none_or(|(_, m)| margin > m) {
                    best = Some((j, margin));
                }
            }
            let Some((j, margin)) = best else { continue };
            let span = spans[k].in_sentence(sentence_index);
            let event = events.get_mut(&j).expect("trigger present");
            match category.kind {
                CategoryKind::Labeled => {
                    let key = (j, category.name.clone());
                    if labeled_margin.get(&key).is_some_and(|m| *m >= margin) {
                        continue;
                    }
                    labeled_margin.insert(key, margin);
                    event.labeled_args.retain(|a| a.arg_type != category.name);
                    event.labeled_args.push(LabeledArg { arg_type: category.name.clone(), span, subtype: name.clone() });
                }
                CategoryKind::SpanOnly => event.span_only_args.push(SpanOnlyArg { arg_type: name.clone(), span }),
                CategoryKind::Trigger => {}
            }
        }
    }

    events
        .into_values()
        .filter(|e| {
            let violations = validate_event(e, schema);
            if let Some(v) = violations.first() {
                debug!("dropping predicted {} event at sentence {sentence_index}: {v}", e.event_type());
            }
            violations.is_empty()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Model

#[derive(Debug, Clone, PartialEq)]
pub struct SpanModel {
    pub config: ModelConfig,
    pub labels: LabelSets,
    pub params: ModelParams,
}

impl SpanModel {
    /// Freshly initialized from `config.seed`.
    pub fn new(config: ModelConfig, labels: LabelSets, input_dim: usize) -> Result<Self, SpanModelError> {
        config.validate()?;
        let mut rng = seed::rng(config.seed, "spanmodel.init");
        let params = ModelParams::init(&mut rng, input_dim, &config, &labels);
        Ok(SpanModel { config, labels, params })
    }

    pub fn input_dim(&self) -> usize {
        self.params.encoder.input_dim
    }

    pub fn scores(&self, embeddings: ArrayView2<'_, f64>) -> Result<SentenceScores, SpanModelError> {
        Ok(forward(&self.params, &self.config, embeddings)?.scores())
    }

    pub fn loss(&self, embeddings: ArrayView2<'_, f64>, targets: &SentenceTargets) -> Result<f64, SpanModelError> {
        Ok(forward(&self.params, &self.config, embeddings)?.loss(targets))
    }

    /// Loss of one sentence and its gradient for every parameter.
    pub fn loss_and_gradient(
        &self,
        embeddings: ArrayView2<'_, f64>,
        targets: &SentenceTargets,
    ) -> Result<(f64, ModelParams), SpanModelError> {
        let pass = forward(&self.params, &self.config, embeddings)?;
        let mut grads = self.params.zeros_like();
        pass.backward(&self.params, targets, &mut grads);
        Ok((pass.loss(targets), grads))
    }

    pub fn predict_sentence(
        &self,
        embeddings: ArrayView2<'_, f64>,
        schema: &Schema,
        sentence_index: usize,
    ) -> Result<Vec<Event>, SpanModelError> {
        Ok(decode(&self.scores(embeddings)?, &self.labels, schema, sentence_index))
    }

    /// Predicted events for a document; any gold events on the input are ignored.
    pub fn extract(
        &self,
        doc: &AnnotatedDocument,
        embeddings: &EmbeddingTable,
        schema: &Schema,
    ) -> Result<AnnotatedDocument, SpanModelError> {
        let per_sentence: Vec<Vec<Event>> = (0..doc.document.sentences.len())
            .into_par_iter()
            .map(|si| {
                let x = sentence_embeddings(doc, si, embeddings)?;
                if x.nrows() == 0 {
                    return Ok(Vec::new());
                }
                self.predict_sentence(x.view(), schema, si)
            })
            .collect::<Result<_, SpanModelError>>()?;
        Ok(AnnotatedDocument { document: doc.document.clone(), events: per_sentence.into_iter().flatten().collect() })
    }

    pub fn extract_corpus(
        &self,
        corpus: &[AnnotatedDocument],
        embeddings: &EmbeddingTable,
        schema: &Schema,
    ) -> Result<Vec<AnnotatedDocument>, SpanModelError> {
        corpus.par_iter().map(|d| self.extract(d, embeddings, schema)).collect()
    }
}

fn sentence_embeddings(
    doc: &AnnotatedDocument,
    sentence_index: usize,
    embeddings: &EmbeddingTable,
) -> Result<Array2<f64>, SpanModelError> {
    let expected = doc.document.sentence_len(sentence_index);
    let x = embeddings.get(doc.doc_id(), sentence_index).ok_or_else(|| SpanModelError::MissingEmbeddings {
        doc_id: doc.doc_id().to_string(),
        sentence_index,
    })?;
    if x.nrows() != expected {
        return Err(SpanModelError::TokenCount {
            doc_id: doc.doc_id().to_string(),
            sentence_index,
            expected,
            found: x.nrows(),
        });
    }
    Ok(x.clone())
}

// ---------------------------------------------------------------------------
// Optimization

pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    first: Option<ModelParams>,
    second: Option<ModelParams>,
    steps: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer { kind, learning_rate, first: None, second: None, steps: 0 }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.steps += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => params.add_scaled(grads, -lr),
            OptimizerKind::Momentum { beta } => {
                let velocity = self.first.get_or_insert_with(|| grads.zeros_like());
                for ((_, mut v), (_, g)) in velocity.tensors_mut().into_iter().zip(grads.tensors()) {
                    for (v, g) in v.values_mut().iter_mut().zip(g.values()) {
                        *v = beta * *v + g;
                    }
                }
                params.add_scaled(velocity, -lr);
            }
            OptimizerKind::Adam { beta1, beta2, epsilon } => {
                let m = self.first.get_or_insert_with(|| grads.zeros_like());
                let v = self.second.get_or_insert_with(|| grads.zeros_like());
                let c1 = 1.0 - beta1.powi(self.steps);
                let c2 = 1.0 - beta2.powi(self.steps);
                let tensors = params.tensors_mut().into_iter().zip(grads.tensors()).zip(m.tensors_mut()).zip(v.tensors_mut());
                for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in tensors {
                    let (p, m, v) = (p.values_mut(), m.values_mut(), v.values_mut());
                    for (i, g) in g.values().iter().enumerate() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + epsilon);
                    }
                }
            }
        }
    }
}

/// One training sentence: fixed embeddings plus gold targets.
#[derive(Debug, Clone)]
pub struct TrainingSentence {
    pub doc_id: String,
    pub sentence_index: usize,
    pub embeddings: Array2<f64>,
    pub targets: SentenceTargets,
}

pub fn prepare_sentences(
    corpus: &[AnnotatedDocument],
    embeddings: &EmbeddingTable,
    labels: &LabelSets,
    config: &ModelConfig,
) -> Result<Vec<TrainingSentence>, SpanModelError> {
    let mut out = Vec::new();
    for doc in corpus {
        let events = if config.substitute { substitute_trigger_spans(&doc.events) } else { doc.events.clone() };
        for si in 0..doc.document.sentences.len() {
            let x = sentence_embeddings(doc, si, embeddings)?;
            if x.nrows() == 0 {
                continue;
            }
            let in_sentence = events.iter().filter(|e| e.trigger.span.sentence_index == si);
            out.push(TrainingSentence {
                doc_id: doc.doc_id().to_string(),
                sentence_index: si,
                embeddings: x,
                targets: build_targets(in_sentence, labels, config.max_width),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Summed over all training sentences, evaluated before each update.
    pub loss: f64,
    pub dev_trigger_f1: Option<f64>,
    pub dev_labeled_f1: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
}

/// Held-out documents scored after every epoch.
pub struct DevSet<'a> {
    pub corpus: &'a [AnnotatedDocument],
    pub embeddings: &'a EmbeddingTable,
}

pub fn train(
    corpus: &[AnnotatedDocument],
    embeddings: &EmbeddingTable,
    schema: &Schema,
    config: &ModelConfig,
    dev: Option<DevSet<'_>>,
) -> Result<(SpanModel, TrainReport), SpanModelError> {
    let labels = LabelSets::from_schema(schema);
    let mut model = SpanModel::new(config.clone(), labels, embeddings.dim)?;
    let sentences = prepare_sentences(corpus, embeddings, &model.labels, config)?;
    let report = train_model(&mut model, &sentences, schema, dev)?;
    Ok((model, report))
}

/// Runs `model.config.epochs` epochs of minibatch training in place.
pub fn train_model(
    model: &mut SpanModel,
    sentences: &[TrainingSentence],
    schema: &Schema,
    dev: Option<DevSet<'_>>,
) -> Result<TrainReport, SpanModelError> {
    train_model_with(model, sentences, schema, dev, |_, _| true)
}

/// As [`train_model`], calling `on_epoch` after every epoch; training stops
/// early when it returns `false`.
pub fn train_model_with(
    model: &mut SpanModel,
    sentences: &[TrainingSentence],
    schema: &Schema,
    dev: Option<DevSet<'_>>,
    mut on_epoch: impl FnMut(&SpanModel, &EpochMetrics) -> bool,
) -> Result<TrainReport, SpanModelError> {
    let config = model.config.clone();
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let mut order: Vec<usize> = (0..sentences.len()).collect();
    let mut report = TrainReport::default();

    for epoch in 0..config.epochs {
        order.shuffle(&mut seed::rng_indexed(config.seed, "spanmodel.shuffle", epoch as u64));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut grads = model.params.zeros_like();
            for &i in batch {
                let sentence = &sentences[i];
                let (loss, g) = model.loss_and_gradient(sentence.embeddings.view(), &sentence.targets)?;
                if !loss.is_finite() {
                    return Err(SpanModelError::NonFiniteLoss {
                        epoch,
                        doc_id: sentence.doc_id.clone(),
                        sentence_index: sentence.sentence_index,
                        loss,
                    });
                }
                epoch_loss += loss;
                grads.add_scaled(&g, 1.0 / batch.len() as f64);
            }
            optimizer.step(&mut model.params, &grads);
        }

        let (dev_trigger_f1, dev_labeled_f1) = match &dev {
            Some(d) => {
                let predicted = model.extract_corpus(d.corpus, d.embeddings, schema)?;
                let report = score_documents(d.corpus, &predicted, TriggerMatchMode::Exact)
                    .map_err(|e| SpanModelError::Config(format!("dev scoring: {e}")))?;
                (Some(report.all_triggers().prf().f1), Some(report.all_labeled().prf().f1))
            }
            None => (None, None),
        };
        info!("epoch {} loss {epoch_loss:.4}", epoch + 1);
        let metrics = EpochMetrics { epoch: epoch + 1, loss: epoch_loss, dev_trigger_f1, dev_labeled_f1 };
        let proceed = on_epoch(model, &metrics);
        report.epochs.push(metrics);
        if !proceed {
            break;
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_MAGIC: &[u8; 4] = b"CEVT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    labels: LabelSets,
    input_dim: usize,
}

impl SpanModel {
    /// Binary checkpoint; the layout is described in the README.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&CheckpointHeader {
            config: self.config.clone(),
            labels: self.labels.clone(),
            input_dim: self.input_dim(),
        })
        .expect("header serializes");
        let tensors = self.params.tensors();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, tensor) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let shape = tensor.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in tensor.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SpanModelError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(SpanModelError::Checkpoint("not a model checkpoint".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(SpanModelError::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = r.u64()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| SpanModelError::Checkpoint(format!("config block: {e}")))?;
        header.config.validate()?;
        let mut params = ModelParams::zeros(header.input_dim, &header.config, &header.labels);
        let mut loaded = BTreeSet::new();
        let count = r.u32()?;
        {
            let mut slots: BTreeMap<String, TensorMut<'_>> = params.tensors_mut().into_iter().collect();
            for _ in 0..count {
                let name_len = r.u32()? as usize;
                let name = String::from_utf8(r.take(name_len)?.to_vec())
                    .map_err(|_| SpanModelError::Checkpoint("tensor name is not UTF-8".into()))?;
                let ndim = r.u32()? as usize;
                let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
                let slot = slots
                    .get_mut(&name)
                    .ok_or_else(|| SpanModelError::Checkpoint(format!("unexpected tensor {name}")))?;
                if slot.shape() != shape {
                    return Err(SpanModelError::Checkpoint(format!(
                        "tensor {name} has shape {shape:?}, expected {:?}",
                        slot.shape()
                    )));
                }
                for v in slot.values_mut() {
                    *v = r.f64()?;
                }
                loaded.insert(name);
            }
            if let Some(missing) = slots.keys().find(|k| !loaded.contains(*k)) {
                return Err(SpanModelError::Checkpoint(format!("missing tensor {missing}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(SpanModelError::Checkpoint("trailing bytes".into()));
        }
        Ok(SpanModel { config: header.config, labels: header.labels, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), SpanModelError> {
        let io = |source| SpanModelError::Io { path: path.display().to_string(), source };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&self.to_bytes()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, SpanModelError> {
        let io = |source| SpanModelError::Io { path: path.display().to_string(), source };
        let mut bytes = Vec::new();
        std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(io)?;
        SpanModel::from_bytes(&bytes)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SpanModelError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| SpanModelError::Checkpoint("truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, SpanModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, SpanModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, SpanModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
