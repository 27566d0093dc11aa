//! Slot-filling evaluation of event annotations.
//!
//! Events are aligned by trigger equivalence. For an aligned pair, labeled
//! arguments are compared by `(argument type, subtype)` only, their spans are
//! ignored. Span-only arguments are compared token by token so partial spans
//! earn partial credit. The same calculus serves system evaluation and
//! annotator agreement.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write as _};
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedDocument, Event, Trigger};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TriggerMatchMode {
    #[default]
    Exact,
    AnyOverlap,
}

impl FromStr for TriggerMatchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "exact" => Ok(TriggerMatchMode::Exact),
            "any-overlap" | "any_overlap" => Ok(TriggerMatchMode::AnyOverlap),
            _ => Err(format!("unknown trigger match mode {s:?} (expected exact or any-overlap)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn new(tp: usize, fp: usize, fn_: usize) -> Self {
        Counts { tp, fp, fn_ }
    }

    pub fn prf(&self) -> Prf {
        prf(self.tp, self.fp, self.fn_)
    }
}

impl Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

impl AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        *self = *self + o;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Precision, recall and F1; every zero denominator yields 0.
pub fn prf(tp: usize, fp: usize, fn_: usize) -> Prf {
    let precision = ratio(tp as f64, (tp + fp) as f64);
    let recall = ratio(tp as f64, (tp + fn_) as f64);
    let f1 = ratio(2.0 * precision * recall, precision + recall);
    Prf { precision, recall, f1 }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum SlotKind {
    Trigger,
    Labeled { arg_type: String, subtype: String },
    SpanOnly { arg_type: String },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Slot {
    pub event_type: String,
    pub kind: SlotKind,
}

impl Slot {
    pub fn trigger(event_type: &str) -> Self {
        Slot { event_type: event_type.to_string(), kind: SlotKind::Trigger }
    }

    pub fn labeled(event_type: &str, arg_type: &str, subtype: &str) -> Self {
        Slot {
            event_type: event_type.to_string(),
            kind: SlotKind::Labeled { arg_type: arg_type.to_string(), subtype: subtype.to_string() },
        }
    }

    pub fn span_only(event_type: &str, arg_type: &str) -> Self {
        Slot { event_type: event_type.to_string(), kind: SlotKind::SpanOnly { arg_type: arg_type.to_string() } }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            SlotKind::Trigger => write!(f, "{}|trigger", self.event_type),
            SlotKind::Labeled { arg_type, subtype } => write!(f, "{}|{arg_type}|{subtype}", self.event_type),
            SlotKind::SpanOnly { arg_type } => write!(f, "{}|{arg_type}", self.event_type),
        }
    }
}

pub fn triggers_equivalent(a: &Trigger, b: &Trigger, mode: TriggerMatchMode) -> bool {
    if a.event_type != b.event_type {
        return false;
    }
    match mode {
        TriggerMatchMode::Exact => a.span == b.span,
        TriggerMatchMode::AnyOverlap => a.span.overlap(&b.span) > 0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Alignment {
    /// `(gold index, pred index)` pairs, sorted by gold index.
    pub matched: Vec<(usize, usize)>,
    pub unmatched_gold: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
}

/// One-to-one alignment. Overlap mode picks pairs greedily by overlap size
/// (largest first), breaking ties by gold then pred order.
pub fn align_events(gold: &[Event], pred: &[Event], mode: TriggerMatchMode) -> Alignment {
    let mut candidates: Vec<(usize, usize, usize)> = Vec::new();
    for (gi, g) in gold.iter().enumerate() {
        for (pi, p) in pred.iter().enumerate() {
            if triggers_equivalent(&g.trigger, &p.trigger, mode) {
                candidates.push((g.trigger.span.overlap(&p.trigger.span), gi, pi));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut gold_used = vec![false; gold.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut matched = Vec::new();
    for (_, gi, pi) in candidates {
        if !gold_used[gi] && !pred_used[pi] {
            gold_used[gi] = true;
            pred_used[pi] = true;
            matched.push((gi, pi));
        }
    }
    matched.sort_unstable();
    Alignment {
        matched,
        unmatched_gold: (0..gold.len()).filter(|&i| !gold_used[i]).collect(),
        unmatched_pred: (0..pred.len()).filter(|&i| !pred_used[i]).collect(),
    }
}

/// Folds events with identical triggers into one, pooling their arguments.
pub fn merge_duplicate_triggers(doc_id: &str, events: &[Event]) -> Vec<Event> {
    let mut out: Vec<Event> = Vec::with_capacity(events.len());
    let mut index: HashMap<&Trigger, usize> = HashMap::new();
    for event in events {
        match index.get(&event.trigger) {
            Some(&i) => {
                log::warn!(
                    "{doc_id}: merging duplicate {} trigger at sentence {} tokens {}..{}",
                    event.trigger.event_type, event.trigger.span.sentence_index, event.trigger.span.start, event.trigger.span.end
                );
                out[i].labeled_args.extend(event.labeled_args.iter().cloned());
                out[i].span_only_args.extend(event.span_only_args.iter().cloned());
            }
            None => {
                index.insert(&event.trigger, out.len());
                out.push(event.clone());
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScoreOptions {
    pub mode: TriggerMatchMode,
    /// Score arguments on overlap-aligned pairs too. When false, argument
    /// rows always come from exact trigger alignment.
    pub arguments_follow_mode: bool,
}

impl From<TriggerMatchMode> for ScoreOptions {
    fn from(mode: TriggerMatchMode) -> Self {
        ScoreOptions { mode, arguments_follow_mode: false }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScoringError {
    #[error("document {0} is present in the gold corpus only")]
    MissingPrediction(String),
    #[error("document {0} is present in the predicted corpus only")]
    MissingGold(String),
    #[error("document id {0} appears more than once")]
    DuplicateDocument(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ScoreReport {
    pub counts: BTreeMap<Slot, Counts>,
}

/// One report line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlotCounts {
    pub slot: String,
    pub counts: Counts,
    pub prf: Prf,
}

impl SlotCounts {
    fn new(slot: String, counts: Counts) -> Self {
        SlotCounts { slot, prf: counts.prf(), counts }
    }
}

impl ScoreReport {
    fn add(&mut self, slot: Slot, counts: Counts) {
        *self.counts.entry(slot).or_default() += counts;
    }

    fn merge(&mut self, other: ScoreReport) {
        for (slot, c) in other.counts {
            self.add(slot, c);
        }
    }

    pub fn get(&self, slot: &Slot) -> Counts {
        self.counts.get(slot).copied().unwrap_or_default()
    }

    pub fn trigger(&self, event_type: &str) -> Counts {
        self.get(&Slot::trigger(event_type))
    }

    fn sum_where(&self, pred: impl Fn(&Slot) -> bool) -> Counts {
        self.counts.iter().filter(|(s, _)| pred(s)).fold(Counts::default(), |acc, (_, c)| acc + *c)
    }

    /// Micro-average over the subtypes of one labeled argument type.
    pub fn labeled_micro(&self, event_type: &str, arg_type: &str) -> Counts {
        self.sum_where(|s| {
            s.event_type == event_type && matches!(&s.kind, SlotKind::Labeled { arg_type: a, .. } if a == arg_type)
        })
    }

    /// Micro-average over every labeled argument of one event type.
    pub fn labeled_overall(&self, event_type: &str) -> Counts {
        self.sum_where(|s| s.event_type == event_type && matches!(s.kind, SlotKind::Labeled { .. }))
    }

    pub fn all_triggers(&self) -> Counts {
        self.sum_where(|s| s.kind == SlotKind::Trigger)
    }

    pub fn all_labeled(&self) -> Counts {
        self.sum_where(|s| matches!(s.kind, SlotKind::Labeled { .. }))
    }

    pub fn all_span_only(&self) -> Counts {
        self.sum_where(|s| matches!(s.kind, SlotKind::SpanOnly { .. }))
    }

    /// Report lines: per event type its trigger row, per labeled argument its
    /// subtype rows then a `micro` row, span-only rows, and a
    /// `labeled_micro` row; then corpus-wide `ALL` rows.
    pub fn rows(&self) -> Vec<SlotCounts> {
        let mut rows = Vec::new();
        let event_types: BTreeSet<&str> = self.counts.keys().map(|s| s.event_type.as_str()).collect();
        for et in event_types {
            rows.push(SlotCounts::new(Slot::trigger(et).to_string(), self.trigger(et)));
            let labeled_types: BTreeSet<&str> = self
                .counts
                .keys()
                .filter(|s| s.event_type == et)
                .filter_map(|s| match &s.kind {
                    SlotKind::Labeled { arg_type, .. } => Some(arg_type.as_str()),
                    _ => None,
                })
                .collect();
            for arg_type in labeled_types {
                for (slot, c) in self.counts.iter().filter(|(s, _)| {
                    s.event_type == et && matches!(&s.kind, SlotKind::Labeled { arg_type: a, .. } if a == arg_type)
                }) {
                    rows.push(SlotCounts::new(slot.to_string(), *c));
                }
                rows.push(SlotCounts::new(format!("{et}|{arg_type}|micro"), self.labeled_micro(et, arg_type)));
            }
            for (slot, c) in self
                .counts
                .iter()
                .filter(|(s, _)| s.event_type == et && matches!(s.kind, SlotKind::SpanOnly { .. }))
            {
                rows.push(SlotCounts::new(slot.to_string(), *c));
            }
            rows.push(SlotCounts::new(format!("{et}|labeled_micro"), self.labeled_overall(et)));
        }
        rows.push(SlotCounts::new("ALL|trigger".into(), self.all_triggers()));
        rows.push(SlotCounts::new("ALL|labeled_micro".into(), self.all_labeled()));
        rows.push(SlotCounts::new("ALL|span_only".into(), self.all_span_only()));
        rows
    }

    /// Columns: slot, tp, fp, fn, P, R, F1.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("slot\ttp\tfp\tfn\tP\tR\tF1\n");
        for r in self.rows() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}",
                r.slot, r.counts.tp, r.counts.fp, r.counts.fn_, r.prf.precision, r.prf.recall, r.prf.f1
            );
        }
        out
    }

    pub fn to_pretty(&self) -> String {
        let rows = self.rows();
        let width = rows.iter().map(|r| r.slot.len()).max().unwrap_or(4).max(4);
        let mut out = format!("{:<width$}  {:>6} {:>6} {:>6}  {:>6} {:>6} {:>6}\n", "slot", "tp", "fp", "fn", "P", "R", "F1");
        for r in rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>6} {:>6} {:>6}  {:>6.3} {:>6.3} {:>6.3}",
                r.slot, r.counts.tp, r.counts.fp, r.counts.fn_, r.prf.precision, r.prf.recall, r.prf.f1
            );
        }
        out
    }
}

fn subtype_multiset(event: &Event) -> BTreeMap<&str, BTreeMap<&str, usize>> {
    let mut m: BTreeMap<&str, BTreeMap<&str, usize>> = BTreeMap::new();
    for a in &event.labeled_args {
        *m.entry(a.arg_type.as_str()).or_default().entry(a.subtype.as_str()).or_insert(0) += 1;
    }
    m
}

fn span_only_tokens(event: &Event) -> BTreeMap<&str, BTreeSet<(usize, usize)>> {
    let mut m: BTreeMap<&str, BTreeSet<(usize, usize)>> = BTreeMap::new();
    for a in &event.span_only_args {
        let set = m.entry(a.arg_type.as_str()).or_default();
        set.extend((a.span.start..a.span.end).map(|t| (a.span.sentence_index, t)));
    }
    m
}

/// Arguments of an event with no counterpart; `gold` selects fn versus fp.
fn score_lone_arguments(report: &mut ScoreReport, event: &Event, gold: bool) {
    let et = event.event_type();
    let side = |n: usize| if gold { Counts::new(0, 0, n) } else { Counts::new(0, n, 0) };
    for a in &event.labeled_args {
        report.add(Slot::labeled(et, &a.arg_type, &a.subtype), side(1));
    }
    for (arg_type, tokens) in span_only_tokens(event) {
        report.add(Slot::span_only(et, arg_type), side(tokens.len()));
    }
}

fn score_argument_pair(report: &mut ScoreReport, gold: &Event, pred: &Event) {
    let et = gold.event_type();
    let g = subtype_multiset(gold);
    let p = subtype_multiset(pred);
    let empty = BTreeMap::new();
    let arg_types: BTreeSet<&str> = g.keys().chain(p.keys()).copied().collect();
    for arg_type in arg_types {
        let gs = g.get(arg_type).unwrap_or(&empty);
        let ps = p.get(arg_type).unwrap_or(&empty);
        let subtypes: BTreeSet<&str> = gs.keys().chain(ps.keys()).copied().collect();
        for subtype in subtypes {
            let gc = gs.get(subtype).copied().unwrap_or(0);
            let pc = ps.get(subtype).copied().unwrap_or(0);
            let both = gc.min(pc);
            report.add(Slot::labeled(et, arg_type, subtype), Counts::new(both, pc - both, gc - both));
        }
    }

    let g = span_only_tokens(gold);
    let p = span_only_tokens(pred);
    let empty = BTreeSet::new();
    let arg_types: BTreeSet<&str> = g.keys().chain(p.keys()).copied().collect();
    for arg_type in arg_types {
        let gt = g.get(arg_type).unwrap_or(&empty);
        let pt = p.get(arg_type).unwrap_or(&empty);
        let tp = gt.intersection(pt).count();
        report.add(Slot::span_only(et, arg_type), Counts::new(tp, pt.len() - tp, gt.len() - tp));
    }
}

fn score_document(doc_id: &str, gold: &[Event], pred: &[Event], options: ScoreOptions) -> ScoreReport {
    let gold = merge_duplicate_triggers(doc_id, gold);
    let pred = merge_duplicate_triggers(doc_id, pred);
    let mut report = ScoreReport::default();

    let triggers = align_events(&gold, &pred, options.mode);
    for &(gi, _) in &triggers.matched {
        report.add(Slot::trigger(gold[gi].event_type()), Counts::new(1, 0, 0));
    }
    for &gi in &triggers.unmatched_gold {
        report.add(Slot::trigger(gold[gi].event_type()), Counts::new(0, 0, 1));
    }
    for &pi in &triggers.unmatched_pred {
        report.add(Slot::trigger(pred[pi].event_type()), Counts::new(0, 1, 0));
    }

    let arguments = if options.mode == TriggerMatchMode::Exact || options.arguments_follow_mode {
        triggers
    } else {
        align_events(&gold, &pred, TriggerMatchMode::Exact)
    };
    for &(gi, pi) in &arguments.matched {
        score_argument_pair(&mut report, &gold[gi], &pred[pi]);
    }
    for &gi in &arguments.unmatched_gold {
        score_lone_arguments(&mut report, &gold[gi], true);
    }
    for &pi in &arguments.unmatched_pred {
        score_lone_arguments(&mut report, &pred[pi], false);
    }
    report
}

fn index_corpus(corpus: &[AnnotatedDocument]) -> Result<BTreeMap<&str, &AnnotatedDocument>, ScoringError> {
    let mut map = BTreeMap::new();
    for doc in corpus {
        if map.insert(doc.doc_id(), doc).is_some() {
            return Err(ScoringError::DuplicateDocument(doc.doc_id().to_string()));
        }
    }
    Ok(map)
}

pub fn score_documents(
    gold: &[AnnotatedDocument],
    pred: &[AnnotatedDocument],
    mode: TriggerMatchMode,
) -> Result<ScoreReport, ScoringError> {
    score_documents_with(gold, pred, mode.into())
}

pub fn score_documents_with(
    gold: &[AnnotatedDocument],
    pred: &[AnnotatedDocument],
    options: ScoreOptions,
) -> Result<ScoreReport, ScoringError> {
    let gold = index_corpus(gold)?;
    let pred = index_corpus(pred)?;
    if let Some(id) = gold.keys().find(|id| !pred.contains_key(*id)) {
        return Err(ScoringError::MissingPrediction(id.to_string()));
    }
    if let Some(id) = pred.keys().find(|id| !gold.contains_key(*id)) {
        return Err(ScoringError::MissingGold(id.to_string()));
    }
    let pairs: Vec<(&str, &AnnotatedDocument, &AnnotatedDocument)> =
        gold.iter().map(|(id, g)| (*id, *g, pred[id])).collect();
    let per_doc: Vec<ScoreReport> = pairs
        .par_iter()
        .map(|(id, g, p)| score_document(id, &g.events, &p.events, options))
        .collect();
    let mut report = ScoreReport::default();
    for r in per_doc {
        report.merge(r);
    }
    Ok(report)
}

/// Agreement between two annotators: annotator A plays gold, triggers must
/// match exactly.
pub fn agreement_report(
    annotator_a: &[AnnotatedDocument],
    annotator_b: &[AnnotatedDocument],
) -> Result<ScoreReport, ScoringError> {
    score_documents(annotator_a, annotator_b, TriggerMatchMode::Exact)
}
