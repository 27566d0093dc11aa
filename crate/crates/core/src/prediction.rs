//! Test-positivity prediction from patient timelines.
//!
//! Each COVID test with at least one note of a chosen type in the preceding
//! window becomes a sample. Samples are featurized from extracted Symptom
//! events (present/absent per normalized symptom) and aggregated structured
//! observations, then evaluated with a random forest under repeated
//! patient-level hold-out.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use log::{debug, warn};
use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::corpus::{AnnotatedDocument, NoteType};
use crate::schema::{normalize_symptom, NormalizationMap, ASSERTION, SYMPTOM};
use crate::seed;

#[derive(Debug, Error)]
pub enum PredictionError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("timeline line {line}: {source}")]
    Timeline { line: usize, source: serde_json::Error },
    #[error("training data has a single class")]
    SingleClass,
    #[error("need at least {needed} patients with {class} samples, found {found}")]
    TooFewPatients { class: &'static str, needed: usize, found: usize },
    #[error("could not draw a split with both classes on each side after {attempts} attempts (repetition {rep})")]
    SplitExhausted { rep: usize, attempts: usize },
    #[error("each group needs at least 2 values")]
    GroupTooSmall,
    #[error("{0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// Timelines

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestResult {
    Positive,
    Negative,
}

/// Times are in days on an arbitrary per-patient origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub time: f64,
    pub result: TestResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteRecord {
    pub time: f64,
    pub note_type: NoteType,
    pub doc_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub field: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTimeline {
    pub patient_id: String,
    #[serde(default)]
    pub tests: Vec<TestRecord>,
    #[serde(default)]
    pub notes: Vec<NoteRecord>,
    #[serde(default)]
    pub observations: Vec<Observation>,
}

impl PatientTimeline {
    /// Stable sort of every sequence by time.
    pub fn sort(&mut self) {
        self.tests.sort_by(|a, b| a.time.total_cmp(&b.time));
        self.notes.sort_by(|a, b| a.time.total_cmp(&b.time));
        self.observations.sort_by(|a, b| a.time.total_cmp(&b.time));
    }
}

/// JSON lines, one patient per line; blank lines are skipped. Sequences
/// come back sorted by time.
pub fn parse_timelines(text: &str) -> Result<Vec<PatientTimeline>, PredictionError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let mut t: PatientTimeline =
                serde_json::from_str(l).map_err(|source| PredictionError::Timeline { line: i + 1, source })?;
            t.sort();
            Ok(t)
        })
        .collect()
}

pub fn load_timelines(path: &Path) -> Result<Vec<PatientTimeline>, PredictionError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| PredictionError::Io { path: path.display().to_string(), source })?;
    parse_timelines(&text)
}

pub fn timelines_to_jsonl(timelines: &[PatientTimeline]) -> String {
    timelines.iter().map(|t| serde_json::to_string(t).expect("timeline serializes") + "\n").collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoteLabel {
    None,
    Positive,
    Negative,
}

/// Label of a note from the tests strictly after it: any positive wins,
/// otherwise any negative, otherwise none.
pub fn assign_note_label(timeline: &PatientTimeline, note_time: f64) -> NoteLabel {
    let future = timeline.tests.iter().filter(|t| t.time > note_time);
    let mut label = NoteLabel::None;
    for test in future {
        match test.result {
            TestResult::Positive => return NoteLabel::Positive,
            TestResult::Negative => label = NoteLabel::Negative,
        }
    }
    label
}

// ---------------------------------------------------------------------------
// Samples

/// One test with the notes and observations in its window.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub patient_id: String,
    pub test_time: f64,
    pub result: TestResult,
    pub notes: Vec<NoteRecord>,
    pub observations: Vec<Observation>,
}

fn in_window(time: f64, test_time: f64, window_days: f64) -> bool {
    time >= test_time - window_days && time < test_time
}

/// One sample per test having at least one `note_type` note in
/// `[test - window_days, test)`. Observations use the same window.
pub fn build_samples(timelines: &[PatientTimeline], note_type: NoteType, window_days: f64) -> Vec<Sample> {
    assert!(window_days >= 1.0, "window must be at least one day");
    let mut samples = Vec::new();
    for timeline in timelines {
        let mut tests = timeline.tests.clone();
        tests.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.result.cmp(&b.result)));
        for test in &tests {
            let mut notes: Vec<NoteRecord> = timeline
                .notes
                .iter()
                .filter(|n| n.note_type == note_type && in_window(n.time, test.time, window_days))
                .cloned()
                .collect();
            if notes.is_empty() {
                continue;
            }
            notes.sort_by(|a, b| a.time.total_cmp(&b.time).then_with(|| a.doc_id.cmp(&b.doc_id)));
            let mut observations: Vec<Observation> = timeline
                .observations
                .iter()
                .filter(|o| in_window(o.time, test.time, window_days))
                .cloned()
                .collect();
            observations.sort_by(|a, b| {
                a.time.total_cmp(&b.time).then_with(|| a.field.cmp(&b.field)).then(a.value.total_cmp(&b.value))
            });
            samples.push(Sample {
                patient_id: timeline.patient_id.clone(),
                test_time: test.time,
                result: test.result,
                notes,
                observations,
            });
        }
    }
    samples.sort_by(|a, b| {
        a.patient_id.cmp(&b.patient_id).then(a.test_time.total_cmp(&b.test_time)).then(a.result.cmp(&b.result))
    });
    samples
}

// ---------------------------------------------------------------------------
// Features

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Min,
    Max,
}

/// Structured field name to aggregator. Fields outside the spec are ignored.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AggregationSpec {
    pub fields: BTreeMap<String, Aggregator>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleFeatureVector {
    pub patient_id: String,
    pub test_time: f64,
    pub positive: bool,
    /// Normalized symptom names marked present in some in-window note.
    pub symptoms: BTreeSet<String>,
    /// `None` when no in-window observation exists.
    pub structured: BTreeMap<String, Option<f64>>,
}

/// Symptom present (Assertion = present) in any in-window note marks the
/// normalized symptom 1; structured fields are aggregated over the window.
pub fn featurize(
    sample: &Sample,
    extracted: &BTreeMap<String, AnnotatedDocument>,
    normalization: &NormalizationMap,
    aggregation: &AggregationSpec,
) -> SampleFeatureVector {
    let mut symptoms = BTreeSet::new();
    for note in &sample.notes {
        let Some(doc) = extracted.get(&note.doc_id) else {
            debug!("note {} has no extracted events", note.doc_id);
            continue;
        };
        for event in doc.events.iter().filter(|e| e.event_type() == SYMPTOM) {
            let present = event.labeled_args.iter().any(|a| a.arg_type == ASSERTION && a.subtype == "present");
            if present {
                symptoms.insert(normalize_symptom(&doc.trigger_text(event), normalization));
            }
        }
    }
    let structured = aggregation
        .fields
        .iter()
        .map(|(field, agg)| {
            let values = sample.observations.iter().filter(|o| &o.field == field).map(|o| o.value);
            let value = match agg {
                Aggregator::Min => values.reduce(f64::min),
                Aggregator::Max => values.reduce(f64::max),
            };
            (field.clone(), value)
        })
        .collect();
    SampleFeatureVector {
        patient_id: sample.patient_id.clone(),
        test_time: sample.test_time,
        positive: sample.result == TestResult::Positive,
        symptoms,
        structured,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Symptom,
    Structured,
}

/// Dense design matrix. Missing structured values are `NaN` until imputed.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub columns: Vec<String>,
    pub kinds: Vec<FeatureKind>,
    pub values: Array2<f64>,
    pub labels: Vec<bool>,
    pub patients: Vec<String>,
}

impl FeatureMatrix {
    /// Symptom columns are the sorted union over all samples, then the
    /// structured fields in spec order.
    pub fn from_vectors(vectors: &[SampleFeatureVector], aggregation: &AggregationSpec) -> Self {
        let symptom_names: BTreeSet<&String> = vectors.iter().flat_map(|v| v.symptoms.iter()).collect();
        let mut columns: Vec<String> = symptom_names.into_iter().cloned().collect();
        let mut kinds = vec![FeatureKind::Symptom; columns.len()];
        columns.extend(aggregation.fields.keys().cloned());
        kinds.resize(columns.len(), FeatureKind::Structured);

        let mut values = Array2::zeros((vectors.len(), columns.len()));
        for (mut row, v) in values.rows_mut().into_iter().zip(vectors) {
            for (j, (name, kind)) in columns.iter().zip(&kinds).enumerate() {
                row[j] = match kind {
                    FeatureKind::Symptom => f64::from(u8::from(v.symptoms.contains(name))),
                    FeatureKind::Structured => v.structured.get(name).copied().flatten().unwrap_or(f64::NAN),
                };
            }
        }
        FeatureMatrix {
            columns,
            kinds,
            values,
            labels: vectors.iter().map(|v| v.positive).collect(),
            patients: vectors.iter().map(|v| v.patient_id.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn columns_of(&self, kind: FeatureKind) -> Vec<usize> {
        (0..self.columns.len()).filter(|&j| self.kinds[j] == kind).collect()
    }

    pub fn all_columns(&self) -> Vec<usize> {
        (0..self.columns.len()).collect()
    }

    /// Rows and columns by index.
    pub fn select(&self, rows: &[usize], columns: &[usize]) -> FeatureMatrix {
        let values = self.values.select(Axis(0), rows).select(Axis(1), columns);
        FeatureMatrix {
            columns: columns.iter().map(|&j| self.columns[j].clone()).collect(),
            kinds: columns.iter().map(|&j| self.kinds[j]).collect(),
            values,
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            patients: rows.iter().map(|&i| self.patients[i].clone()).collect(),
        }
    }
}

/// Per-column fill values learned from a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Imputer {
    pub means: Vec<f64>,
}

impl Imputer {
    /// Means of observed values per column; a column never observed gets 0.
    pub fn fit(train: &FeatureMatrix) -> Result<Self, PredictionError> {
        if train.is_empty() {
            return Err(PredictionError::Invalid("cannot impute from an empty training split".into()));
        }
        let means = train
            .values
            .columns()
            .into_iter()
            .zip(&train.columns)
            .map(|(col, name)| {
                let observed: Vec<f64> = col.iter().copied().filter(|v| !v.is_nan()).collect();
                if observed.is_empty() {
                    warn!("{name} is never observed in the training split; imputing 0");
                    0.0
                } else {
                    observed.iter().sum::<f64>() / observed.len() as f64
                }
            })
            .collect();
        Ok(Imputer { means })
    }

    pub fn apply(&self, matrix: &mut FeatureMatrix) {
        for (mut col, mean) in matrix.values.columns_mut().into_iter().zip(&self.means) {
            col.mapv_inplace(|v| if v.is_nan() { *mean } else { v });
        }
    }
}

/// Imputes both splits with constants fitted on `train` only.
pub fn impute(train: &mut FeatureMatrix, eval: &mut FeatureMatrix) -> Result<Imputer, PredictionError> {
    let imputer = Imputer::fit(train)?;
    imputer.apply(train);
    imputer.apply(eval);
    Ok(imputer)
}

// ---------------------------------------------------------------------------
// Random forest

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    Sqrt,
    All,
    Count(usize),
}

impl MaxFeatures {
    fn resolve(&self, n_features: usize) -> usize {
        let k = match *self {
            MaxFeatures::Sqrt => (n_features as f64).sqrt().floor() as usize,
            MaxFeatures::All => n_features,
            MaxFeatures::Count(k) => k,
        };
        k.clamp(1, n_features.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub max_features: MaxFeatures,
    pub min_samples_split: usize,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams { n_trees: 100, max_depth: 8, max_features: MaxFeatures::Sqrt, min_samples_split: 2, bootstrap: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf { positive: bool },
    Split { feature: usize, threshold: f64, left: usize, right: usize },
}

/// CART tree with Gini impurity; `x[feature] <= threshold` goes left.
#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

impl DecisionTree {
    pub fn fit(x: ArrayView2<'_, f64>, y: &[bool], rows: &[usize], params: &ForestParams, rng: &mut ChaCha8Rng) -> Self {
        let mut tree = DecisionTree { nodes: Vec::new() };
        let mut rows = rows.to_vec();
        tree.grow(x, y, &mut rows, 0, params, rng);
        tree
    }

    fn grow(
        &mut self,
        x: ArrayView2<'_, f64>,
        y: &[bool],
        rows: &mut [usize],
        depth: usize,
        params: &ForestParams,
        rng: &mut ChaCha8Rng,
    ) -> usize {
        let n = rows.len();
        let pos = rows.iter().filter(|&&r| y[r]).count();
        let id = self.nodes.len();
        // strict majority votes positive
        self.nodes.push(Node::Leaf { positive: 2 * pos > n });
        if pos == 0 || pos == n || depth >= params.max_depth || n < params.min_samples_split.max(2) {
            return id;
        }

        let n_features = x.ncols();
        let mut features: Vec<usize> = (0..n_features).collect();
        features.shuffle(rng);
        features.truncate(params.max_features.resolve(n_features));

        let parent = gini(pos, n);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted: Vec<(f64, bool)> = Vec::with_capacity(n);
        for &f in &features {
            sorted.clear();
            sorted.extend(rows.iter().map(|&r| (x[[r, f]], y[r])));
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left_pos = 0;
            for i in 0..n - 1 {
                left_pos += usize::from(sorted[i].1);
                if sorted[i].0 == sorted[i + 1].0 {
                    continue;
                }
                let nl = i + 1;
                let impurity = (nl as f64 * gini(left_pos, nl) + (n - nl) as f64 * gini(pos - left_pos, n - nl)) / n as f64;
                if impurity < parent - 1e-12 && best.is_none_or(|(b, _, _)| impurity < b) {
                    let mid = 0.5 * (sorted[i].0 + sorted[i + 1].0);
                    let threshold = if mid < sorted[i + 1].0 { mid } else { sorted[i].0 };
                    best = Some((impurity, f, threshold));
                }
            }
        }
        let Some((_, feature, threshold)) = best else { return id };

        let mut split = 0;
        for i in 0..n {
            if x[[rows[i], feature]] <= threshold {
                rows.swap(i, split);
                split += 1;
            }
        }
        let (left_rows, right_rows) = rows.split_at_mut(split);
        let left = self.grow(x, y, left_rows, depth + 1, params, rng);
        let right = self.grow(x, y, right_rows, depth + 1, params, rng);
        self.nodes[id] = Node::Split { feature, threshold, left, right };
        id
    }

    pub fn predict(&self, row: ndarray::ArrayView1<'_, f64>) -> bool {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { positive } => return positive,
                Node::Split { feature, threshold, left, right } => {
                    i = if row[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    pub trees: Vec<DecisionTree>,
}

impl RandomForest {
    /// Fraction of trees voting positive, per row.
    pub fn predict_proba(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|row| self.trees.iter().filter(|t| t.predict(row)).count() as f64 / self.trees.len() as f64)
            .collect()
    }
}

pub fn fit_forest(x: ArrayView2<'_, f64>, y: &[bool], params: &ForestParams, seed: u64) -> Result<RandomForest, PredictionError> {
    assert_eq!(x.nrows(), y.len(), "one label per row");
    if params.n_trees == 0 {
        return Err(PredictionError::Invalid("a forest needs at least one tree".into()));
    }
    let pos = y.iter().filter(|v| **v).count();
    if pos == 0 || pos == y.len() {
        return Err(PredictionError::SingleClass);
    }
    let n = y.len();
    let trees = (0..params.n_trees)
        .map(|t| {
            let mut rng = seed::rng_indexed(seed, "forest.tree", t as u64);
            let rows: Vec<usize> =
                if params.bootstrap { (0..n).map(|_| rng.random_range(0..n)).collect() } else { (0..n).collect() };
            DecisionTree::fit(x, y, &rows, params, &mut rng)
        })
        .collect();
    Ok(RandomForest { trees })
}

// ---------------------------------------------------------------------------
// ROC

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RocCurve {
    /// From `(0, 0)` at threshold `+inf` to `(1, 1)`.
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Descending-score sweep with tied scores grouped; the area is the exact
/// trapezoid sum, which equals pairwise concordance with ties as 0.5.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<RocCurve, PredictionError> {
    assert_eq!(scores.len(), labels.len(), "one label per score");
    let positives = labels.iter().filter(|v| **v).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(PredictionError::SingleClass);
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(PredictionError::Invalid("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint { threshold: f64::INFINITY, tpr: 0.0, fpr: 0.0 }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_area: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += u128::from(fp - fp0) * u128::from(tp + tp0);
        points.push(RocPoint { threshold, tpr: tp as f64 / positives as f64, fpr: fp as f64 / negatives as f64 });
    }
    let auc = twice_area as f64 / (2 * u128::from(positives) * u128::from(negatives)) as f64;
    Ok(RocCurve { points, auc })
}

/// Smallest FPR among points whose TPR reaches `target_tpr`.
pub fn fpr_at_tpr(curve: &RocCurve, target_tpr: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| p.tpr >= target_tpr - 1e-12)
        .map(|p| p.fpr)
        .fold(1.0, f64::min)
}

// ---------------------------------------------------------------------------
// Repeated hold-out

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HoldoutConfig {
    pub reps: usize,
    /// Fraction of patients held out.
    pub test_fraction: f64,
    pub seed: u64,
    pub max_redraws: usize,
    pub target_tpr: f64,
    pub forest: ForestParams,
    pub keep_curves: bool,
}

impl Default for HoldoutConfig {
    fn default() -> Self {
        HoldoutConfig {
            reps: 1000,
            test_fraction: 0.2,
            seed: 0,
            max_redraws: 100,
            target_tpr: 0.8,
            forest: ForestParams::default(),
            keep_curves: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HoldoutResult {
    pub aucs: Vec<f64>,
    pub fprs: Vec<f64>,
    pub mean_auc: f64,
    pub sd_auc: f64,
    pub mean_fpr: f64,
    pub sd_fpr: f64,
    /// Splits rejected for lacking a class on one side.
    pub redraws: usize,
    pub curves: Option<Vec<RocCurve>>,
}

/// Sample mean and (n - 1) standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Patient-disjoint train/test row indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn has_both(labels: &[bool], rows: &[usize]) -> bool {
    rows.iter().any(|&r| labels[r]) && rows.iter().any(|&r| !labels[r])
}

/// The split of repetition `rep`; it depends only on the patients, labels
/// and seed, so every feature set sees the same splits.
pub fn draw_split(matrix: &FeatureMatrix, config: &HoldoutConfig, rep: usize) -> Result<(Split, usize), PredictionError> {
    let patients: Vec<&String> = matrix.patients.iter().collect::<BTreeSet<_>>().into_iter().collect();
    let n_test = ((patients.len() as f64 * config.test_fraction).round() as usize).clamp(1, patients.len() - 1);
    let rep_seed = seed::derive_indexed(config.seed, "holdout.split", rep as u64);
    for attempt in 0..=config.max_redraws {
        let mut shuffled = patients.clone();
        shuffled.shuffle(&mut seed::rng_indexed(rep_seed, "attempt", attempt as u64));
        let held: BTreeSet<&String> = shuffled[..n_test].iter().copied().collect();
        let (test, train): (Vec<usize>, Vec<usize>) = (0..matrix.len()).partition(|&i| held.contains(&matrix.patients[i]));
        if has_both(&matrix.labels, &test) && has_both(&matrix.labels, &train) {
            if attempt > 0 {
                debug!("repetition {rep}: redrew the split {attempt} time(s)");
            }
            return Ok((Split { train, test }, attempt));
        }
    }
    Err(PredictionError::SplitExhausted { rep, attempts: config.max_redraws + 1 })
}

fn check_patients(matrix: &FeatureMatrix) -> Result<(), PredictionError> {
    for (class, want) in [("positive", true), ("negative", false)] {
        let found = matrix
            .patients
            .iter()
            .zip(&matrix.labels)
            .filter(|(_, l)| **l == want)
            .map(|(p, _)| p)
            .collect::<BTreeSet<_>>()
            .len();
        if found < 2 {
            return Err(PredictionError::TooFewPatients { class, needed: 2, found });
        }
    }
    Ok(())
}

/// Train on the imputed training split, score the test split.
pub fn evaluate_split(
    matrix: &FeatureMatrix,
    columns: &[usize],
    split: &Split,
    forest: &ForestParams,
    forest_seed: u64,
) -> Result<RocCurve, PredictionError> {
    let mut train = matrix.select(&split.train, columns);
    let mut test = matrix.select(&split.test, columns);
    impute(&mut train, &mut test)?;
    let model = fit_forest(train.values.view(), &train.labels, forest, forest_seed)?;
    roc_auc(&model.predict_proba(test.values.view()), &test.labels)
}

/// Repetitions run in parallel; each derives its seeds from the master
/// seed and its index, so results do not depend on scheduling.
pub fn repeated_holdout(matrix: &FeatureMatrix, columns: &[usize], config: &HoldoutConfig) -> Result<HoldoutResult, PredictionError> {
    if config.reps == 0 {
        return Err(PredictionError::Invalid("reps must be positive".into()));
    }
    if columns.is_empty() {
        return Err(PredictionError::Invalid("no feature columns selected".into()));
    }
    if !(config.test_fraction > 0.0 && config.test_fraction < 1.0) {
        return Err(PredictionError::Invalid("test_fraction must lie in (0, 1)".into()));
    }
    check_patients(matrix)?;
    let per_rep: Vec<(RocCurve, usize)> = (0..config.reps)
        .into_par_iter()
        .map(|rep| {
            let (split, redraws) = draw_split(matrix, config, rep)?;
            let forest_seed = seed::derive_indexed(config.seed, "holdout.forest", rep as u64);
            Ok((evaluate_split(matrix, columns, &split, &config.forest, forest_seed)?, redraws))
        })
        .collect::<Result<_, PredictionError>>()?;
    let aucs: Vec<f64> = per_rep.iter().map(|(c, _)| c.auc).collect();
    let fprs: Vec<f64> = per_rep.iter().map(|(c, _)| fpr_at_tpr(c, config.target_tpr)).collect();
    let redraws = per_rep.iter().map(|(_, r)| r).sum();
    if redraws > 0 {
        warn!("{redraws} single-class split(s) were redrawn");
    }
    let (mean_auc, sd_auc) = mean_sd(&aucs);
    let (mean_fpr, sd_fpr) = mean_sd(&fprs);
    let curves = config.keep_curves.then(|| per_rep.into_iter().map(|(c, _)| c).collect());
    Ok(HoldoutResult { aucs, fprs, mean_auc, sd_auc, mean_fpr, sd_fpr, redraws, curves })
}

// ---------------------------------------------------------------------------
// Significance and importance

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: f64,
}

/// Welch's unequal-variance t-test, two-sided.
pub fn two_sided_ttest(a: &[f64], b: &[f64]) -> Result<TTest, PredictionError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(PredictionError::GroupTooSmall);
    }
    let (ma, sa) = mean_sd(a);
    let (mb, sb) = mean_sd(b);
    let (va, vb) = (sa * sa / a.len() as f64, sb * sb / b.len() as f64);
    let se2 = va + vb;
    if se2 == 0.0 {
        return Ok(if ma == mb {
            TTest { t: 0.0, p: 1.0, df: f64::NAN }
        } else {
            TTest { t: (ma - mb).signum() * f64::INFINITY, p: 0.0, df: f64::NAN }
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (va * va / (a.len() as f64 - 1.0) + vb * vb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| PredictionError::Invalid(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    Ok(TTest { t, p, df })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureImportance {
    pub column: usize,
    pub name: String,
    /// Mean AUC drop when the column is shuffled.
    pub importance: f64,
    pub sd: f64,
}

/// Permutation importance, a model-agnostic stand-in for Shapley-value
/// attributions. Sorted by importance, largest first.
pub fn permutation_importance(
    forest: &RandomForest,
    eval: &FeatureMatrix,
    reps: usize,
    seed: u64,
) -> Result<Vec<FeatureImportance>, PredictionError> {
    if reps == 0 {
        return Err(PredictionError::Invalid("permutation importance needs at least one repetition".into()));
    }
    let baseline = roc_auc(&forest.predict_proba(eval.values.view()), &eval.labels)?.auc;
    let mut out = Vec::with_capacity(eval.columns.len());
    for (f, name) in eval.columns.iter().enumerate() {
        let drops: Vec<f64> = (0..reps)
            .map(|rep| {
                let mut shuffled = eval.values.clone();
                let mut column: Vec<f64> = shuffled.column(f).to_vec();
                column.shuffle(&mut seed::rng_indexed(seed::derive_indexed(seed, "importance", f as u64), "rep", rep as u64));
                shuffled.column_mut(f).assign(&ndarray::Array1::from(column));
                roc_auc(&forest.predict_proba(shuffled.view()), &eval.labels).map(|c| baseline - c.auc)
            })
            .collect::<Result<_, _>>()?;
        let (importance, sd) = mean_sd(&drops);
        out.push(FeatureImportance { column: f, name: name.clone(), importance, sd });
    }
    out.sort_by(|a, b| b.importance.total_cmp(&a.importance).then(a.column.cmp(&b.column)));
    Ok(out)
}

// ---------------------------------------------------------------------------
// End-to-end comparison

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictionConfig {
    pub window_days: f64,
    pub aggregation: AggregationSpec,
    pub holdout: HoldoutConfig,
    pub importance_reps: usize,
}

impl Default for PredictionConfig {
    fn default() -> Self {
        PredictionConfig { window_days: 7.0, aggregation: AggregationSpec::default(), holdout: HoldoutConfig::default(), importance_reps: 5 }
    }
}

/// Hold-out results for the three feature sets and the comparison of all
/// features against structured fields only.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionReport {
    pub note_type: NoteType,
    pub samples: usize,
    pub positives: usize,
    pub feature_sets: Vec<(String, HoldoutResult)>,
    pub all_vs_structured: Option<TTest>,
    /// Permutation importance on the first split with all features.
    pub importance: Vec<FeatureImportance>,
}

pub fn build_feature_matrix(
    timelines: &[PatientTimeline],
    extracted: &BTreeMap<String, AnnotatedDocument>,
    note_type: NoteType,
    normalization: &NormalizationMap,
    config: &PredictionConfig,
) -> FeatureMatrix {
    let samples = build_samples(timelines, note_type, config.window_days);
    let vectors: Vec<SampleFeatureVector> =
        samples.iter().map(|s| featurize(s, extracted, normalization, &config.aggregation)).collect();
    FeatureMatrix::from_vectors(&vectors, &config.aggregation)
}

pub fn compare_feature_sets(matrix: &FeatureMatrix, note_type: NoteType, config: &PredictionConfig) -> Result<PredictionReport, PredictionError> {
    let sets = [
        ("all", matrix.all_columns()),
        ("structured", matrix.columns_of(FeatureKind::Structured)),
        ("symptoms", matrix.columns_of(FeatureKind::Symptom)),
    ];
    let mut feature_sets = Vec::new();
    for (name, columns) in sets {
        if columns.is_empty() {
            warn!("feature set {name} has no columns; skipped");
            continue;
        }
        feature_sets.push((name.to_string(), repeated_holdout(matrix, &columns, &config.holdout)?));
    }
    let find = |n: &str| feature_sets.iter().find(|(k, _)| k == n).map(|(_, r)| r);
    let all_vs_structured = match (find("all"), find("structured")) {
        (Some(a), Some(s)) if a.aucs.len() >= 2 => Some(two_sided_ttest(&a.aucs, &s.aucs)?),
        _ => None,
    };
    let importance = if config.importance_reps > 0 {
        let (split, _) = draw_split(matrix, &config.holdout, 0)?;
        let columns = matrix.all_columns();
        let mut train = matrix.select(&split.train, &columns);
        let mut test = matrix.select(&split.test, &columns);
        impute(&mut train, &mut test)?;
        let seed = seed::derive(config.holdout.seed, "importance.forest");
        let forest = fit_forest(train.values.view(), &train.labels, &config.holdout.forest, seed)?;
        permutation_importance(&forest, &test, config.importance_reps, config.holdout.seed)?
    } else {
        Vec::new()
    };
    Ok(PredictionReport {
        note_type,
        samples: matrix.len(),
        positives: matrix.labels.iter().filter(|v| **v).count(),
        feature_sets,
        all_vs_structured,
        importance,
    })
}

impl PredictionReport {
    /// `metric\tmean\tsd\tn` rows.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tmean\tsd\tn\n");
        for (name, r) in &self.feature_sets {
            let _ = writeln!(out, "{name}.auc\t{:.6}\t{:.6}\t{}", r.mean_auc, r.sd_auc, r.aucs.len());
            let _ = writeln!(out, "{name}.fpr_at_tpr\t{:.6}\t{:.6}\t{}", r.mean_fpr, r.sd_fpr, r.fprs.len());
        }
        if let Some(t) = &self.all_vs_structured {
            let _ = writeln!(out, "all_vs_structured.t\t{:.6}\t\t", t.t);
            let _ = writeln!(out, "all_vs_structured.p\t{:.6e}\t\t", t.p);
        }
        for f in &self.importance {
            let _ = writeln!(out, "permutation_importance.{}\t{:.6}\t{:.6}\t", f.name, f.importance, f.sd);
        }
        out
    }

    /// `feature_set\trep\tthreshold\tfpr\ttpr` for every kept curve.
    pub fn roc_points_tsv(&self) -> String {
        let mut out = String::from("feature_set\trep\tthreshold\tfpr\ttpr\n");
        for (name, r) in &self.feature_sets {
            for (rep, curve) in r.curves.iter().flatten().enumerate() {
                for p in &curve.points {
                    let _ = writeln!(out, "{name}\t{rep}\t{}\t{}\t{}", p.threshold, p.fpr, p.tpr);
                }
            }
        }
        out
    }
}
