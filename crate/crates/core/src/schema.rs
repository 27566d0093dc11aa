//! Annotation scheme declaration and the corpus preparation transforms.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::Deserialize;
use thiserror::Error;

use crate::corpus::{AnnotatedDocument, Event, TokenSpan};

pub const COVID: &str = "COVID";
pub const SYMPTOM: &str = "Symptom";
pub const ASSERTION: &str = "Assertion";

const DEFAULT_SCHEMA: &str = include_str!("../data/default_schema.json");
const DEFAULT_NORMALIZATION: &str = include_str!("../data/default_normalization.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArgKind {
    Labeled,
    SpanOnly,
}

impl fmt::Display for ArgKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArgKind::Labeled => "labeled",
            ArgKind::SpanOnly => "span_only",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArgumentDef {
    pub name: String,
    pub kind: ArgKind,
    pub required_group: Option<String>,
    pub subtypes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EventTypeDef {
    pub arguments: Vec<ArgumentDef>,
}

impl EventTypeDef {
    pub fn argument(&self, name: &str) -> Option<&ArgumentDef> {
        self.arguments.iter().find(|a| a.name == name)
    }

    /// Group id -> member argument names.
    pub fn required_groups(&self) -> BTreeMap<&str, Vec<&str>> {
        let mut groups: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for arg in &self.arguments {
            if let Some(g) = &arg.required_group {
                groups.entry(g.as_str()).or_default().push(arg.name.as_str());
            }
        }
        groups
    }

    pub fn accepts_labeled(&self, arg_type: &str, subtype: &str) -> bool {
        self.argument(arg_type)
            .is_some_and(|a| a.kind == ArgKind::Labeled && a.subtypes.iter().any(|s| s == subtype))
    }

    pub fn accepts_span_only(&self, arg_type: &str) -> bool {
        self.argument(arg_type).is_some_and(|a| a.kind == ArgKind::SpanOnly)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    pub event_types: BTreeMap<String, EventTypeDef>,
}

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("schema config is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{event_type}.{arg}: unknown argument kind {kind:?} (expected labeled or span_only)")]
    UnknownKind { event_type: String, arg: String, kind: String },
    #[error("{event_type}: duplicate argument {arg}")]
    DuplicateArgument { event_type: String, arg: String },
    #[error("{event_type}.{arg}: labeled argument needs at least one subtype")]
    EmptySubtypes { event_type: String, arg: String },
    #[error("{event_type}.{arg}: span-only argument cannot declare subtypes")]
    UnexpectedSubtypes { event_type: String, arg: String },
    #[error("schema declares no event types")]
    NoEventTypes,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchema {
    event_types: BTreeMap<String, Vec<RawArgument>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArgument {
    name: String,
    kind: String,
    #[serde(default)]
    subtypes: Vec<String>,
    #[serde(default)]
    required_group: Option<String>,
}

/// Parses and validates a schema config.
pub fn load_schema(config_text: &str) -> Result<Schema, SchemaError> {
    let raw: RawSchema = serde_json::from_str(config_text)?;
    if raw.event_types.is_empty() {
        return Err(SchemaError::NoEventTypes);
    }
    let mut event_types = BTreeMap::new();
    for (event_type, args) in raw.event_types {
        let mut arguments: Vec<ArgumentDef> = Vec::with_capacity(args.len());
        for arg in args {
            let kind = match arg.kind.as_str() {
                "labeled" => ArgKind::Labeled,
                "span_only" => ArgKind::SpanOnly,
                other => {
                    return Err(SchemaError::UnknownKind { event_type, arg: arg.name, kind: other.to_string() })
                }
            };
            if arguments.iter().any(|a| a.name == arg.name) {
                return Err(SchemaError::DuplicateArgument { event_type, arg: arg.name });
            }
            match kind {
                ArgKind::Labeled if arg.subtypes.is_empty() => {
                    return Err(SchemaError::EmptySubtypes { event_type, arg: arg.name })
                }
                ArgKind::SpanOnly if !arg.subtypes.is_empty() => {
                    return Err(SchemaError::UnexpectedSubtypes { event_type, arg: arg.name })
                }
                _ => {}
            }
            arguments.push(ArgumentDef { name: arg.name, kind, required_group: arg.required_group, subtypes: arg.subtypes });
        }
        event_types.insert(event_type, EventTypeDef { arguments });
    }
    Ok(Schema { event_types })
}

impl Default for Schema {
    /// The shipped COVID/Symptom scheme.
    fn default() -> Self {
        load_schema(DEFAULT_SCHEMA).expect("shipped schema is valid")
    }
}

impl Schema {
    pub fn default_config_text() -> &'static str {
        DEFAULT_SCHEMA
    }

    pub fn event_type(&self, name: &str) -> Option<&EventTypeDef> {
        self.event_types.get(name)
    }

    /// Names of labeled arguments across event types, in first-seen order,
    /// with the union of their subtypes. Larger subtype lists are visited
    /// first so a shared argument keeps the order of its richest definition.
    pub fn labeled_arguments(&self) -> Vec<(String, Vec<String>)> {
        let mut defs: Vec<(usize, &ArgumentDef)> = self
            .event_types
            .values()
            .flat_map(|et| et.arguments.iter().enumerate())
            .filter(|(_, a)| a.kind == ArgKind::Labeled)
            .collect();
        // stable: position within event type, then longer label set
        defs.sort_by(|(pa, a), (pb, b)| pa.cmp(pb).then(b.subtypes.len().cmp(&a.subtypes.len())));
        let mut out: Vec<(String, Vec<String>)> = Vec::new();
        for (_, def) in defs {
            let entry = match out.iter_mut().position(|(n, _)| *n == def.name) {
                Some(i) => &mut out[i].1,
                None => {
                    out.push((def.name.clone(), Vec::new()));
                    &mut out.last_mut().unwrap().1
                }
            };
            for s in &def.subtypes {
                if !entry.contains(s) {
                    entry.push(s.clone());
                }
            }
        }
        out
    }

    /// Span-only argument names across event types, first-seen order.
    pub fn span_only_arguments(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for et in self.event_types.values() {
            for a in et.arguments.iter().filter(|a| a.kind == ArgKind::SpanOnly) {
                if !out.contains(&a.name) {
                    out.push(a.name.clone());
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    UnknownEventType { event_type: String },
    UnknownArgument { event_type: String, arg_type: String },
    WrongKind { event_type: String, arg_type: String, declared: ArgKind },
    UnknownSubtype { event_type: String, arg_type: String, subtype: String },
    MissingRequiredGroup { event_type: String, group: String, members: Vec<String> },
    SentenceMismatch { event_type: String, arg_type: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnknownEventType { event_type } => write!(f, "unknown event type {event_type}"),
            Violation::UnknownArgument { event_type, arg_type } => {
                write!(f, "{event_type} has no argument {arg_type}")
            }
            Violation::WrongKind { event_type, arg_type, declared } => {
                write!(f, "{event_type}.{arg_type} is declared {declared}")
            }
            Violation::UnknownSubtype { event_type, arg_type, subtype } => {
                write!(f, "{event_type}.{arg_type} has no subtype {subtype}")
            }
            Violation::MissingRequiredGroup { event_type, group, members } => {
                write!(f, "{event_type} requires one of [{}] (group {group})", members.join(", "))
            }
            Violation::SentenceMismatch { event_type, arg_type } => {
                write!(f, "{event_type}.{arg_type} lies outside the trigger's sentence")
            }
        }
    }
}

pub fn validate_event(event: &Event, schema: &Schema) -> Vec<Violation> {
    let event_type = event.event_type().to_string();
    let Some(def) = schema.event_type(&event_type) else {
        return vec![Violation::UnknownEventType { event_type }];
    };
    let mut violations = Vec::new();
    let sentence = event.trigger.span.sentence_index;

    for arg in &event.labeled_args {
        match def.argument(&arg.arg_type) {
            None => violations.push(Violation::UnknownArgument { event_type: event_type.clone(), arg_type: arg.arg_type.clone() }),
            Some(a) if a.kind != ArgKind::Labeled => violations.push(Violation::WrongKind {
                event_type: event_type.clone(),
                arg_type: arg.arg_type.clone(),
                declared: a.kind,
            }),
            Some(a) if !a.subtypes.contains(&arg.subtype) => violations.push(Violation::UnknownSubtype {
                event_type: event_type.clone(),
                arg_type: arg.arg_type.clone(),
                subtype: arg.subtype.clone(),
            }),
            Some(_) => {}
        }
        if arg.span.sentence_index != sentence {
            violations.push(Violation::SentenceMismatch { event_type: event_type.clone(), arg_type: arg.arg_type.clone() });
        }
    }
    for arg in &event.span_only_args {
        match def.argument(&arg.arg_type) {
            None => violations.push(Violation::UnknownArgument { event_type: event_type.clone(), arg_type: arg.arg_type.clone() }),
            Some(a) if a.kind != ArgKind::SpanOnly => violations.push(Violation::WrongKind {
                event_type: event_type.clone(),
                arg_type: arg.arg_type.clone(),
                declared: a.kind,
            }),
            Some(_) => {}
        }
        if arg.span.sentence_index != sentence {
            violations.push(Violation::SentenceMismatch { event_type: event_type.clone(), arg_type: arg.arg_type.clone() });
        }
    }

    for (group, members) in def.required_groups() {
        let satisfied = members.iter().any(|m| {
            event.labeled_args.iter().any(|a| a.arg_type == *m) || event.span_only_args.iter().any(|a| a.arg_type == *m)
        });
        if !satisfied {
            violations.push(Violation::MissingRequiredGroup {
                event_type: event_type.clone(),
                group: group.to_string(),
                members: members.iter().map(|m| m.to_string()).collect(),
            });
        }
    }
    violations
}

// ---------------------------------------------------------------------------
// Corpus preparation

/// Shortens every trigger of `event_type` to its first token.
pub fn truncate_triggers(doc: &AnnotatedDocument, event_type: &str) -> AnnotatedDocument {
    let mut out = doc.clone();
    for event in out.events.iter_mut().filter(|e| e.trigger.event_type == event_type) {
        let span = &mut event.trigger.span;
        *span = TokenSpan::new(span.sentence_index, span.start, span.start + 1);
    }
    out
}

pub fn truncate_covid_triggers(doc: &AnnotatedDocument) -> AnnotatedDocument {
    truncate_triggers(doc, COVID)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SymptomVocabulary {
    pub entries: BTreeSet<String>,
    pub min_count: usize,
}

impl SymptomVocabulary {
    pub fn contains(&self, trigger_text: &str) -> bool {
        self.entries.contains(&trigger_text.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Counts uncased Symptom trigger strings; call on the training partition only.
pub fn build_symptom_vocabulary(corpus: &[AnnotatedDocument], min_count: usize) -> SymptomVocabulary {
    assert!(min_count >= 1, "min_count must be positive");
    let mut counts: HashMap<String, usize> = HashMap::new();
    for doc in corpus {
        for event in doc.events.iter().filter(|e| e.trigger.event_type == SYMPTOM) {
            *counts.entry(doc.trigger_text(event)).or_insert(0) += 1;
        }
    }
    SymptomVocabulary {
        entries: counts.into_iter().filter(|(_, c)| *c >= min_count).map(|(k, _)| k).collect(),
        min_count,
    }
}

/// Drops Symptom events whose trigger text is outside the vocabulary.
pub fn filter_symptoms(doc: &AnnotatedDocument, vocabulary: &SymptomVocabulary) -> AnnotatedDocument {
    let events = doc
        .events
        .iter()
        .filter(|e| e.trigger.event_type != SYMPTOM || vocabulary.entries.contains(&doc.trigger_text(e)))
        .cloned()
        .collect();
    AnnotatedDocument { document: doc.document.clone(), events }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NormalizationMap {
    map: BTreeMap<String, String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NormalizationError {
    #[error("line {line}: expected `raw<TAB>canonical`")]
    Malformed { line: usize },
    #[error("canonical name {canonical:?} is itself mapped to {target:?}")]
    NotFixedPoint { canonical: String, target: String },
}

fn normalize_key(s: &str) -> String {
    crate::corpus::normalize_whitespace(s).to_lowercase()
}

impl NormalizationMap {
    pub fn from_pairs<I, A, B>(pairs: I) -> Result<Self, NormalizationError>
    where
        I: IntoIterator<Item = (A, B)>,
        A: AsRef<str>,
        B: AsRef<str>,
    {
        let map: BTreeMap<String, String> =
            pairs.into_iter().map(|(a, b)| (normalize_key(a.as_ref()), normalize_key(b.as_ref()))).collect();
        for canonical in map.values() {
            if let Some(target) = map.get(canonical) {
                if target != canonical {
                    return Err(NormalizationError::NotFixedPoint { canonical: canonical.clone(), target: target.clone() });
                }
            }
        }
        Ok(NormalizationMap { map })
    }

    /// Two-column TSV; `#` lines are comments.
    pub fn from_tsv(text: &str) -> Result<Self, NormalizationError> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (raw, canonical) = line.split_once('\t').ok_or(NormalizationError::Malformed { line: i + 1 })?;
            if raw.trim().is_empty() || canonical.trim().is_empty() || canonical.contains('\t') {
                return Err(NormalizationError::Malformed { line: i + 1 });
            }
            pairs.push((raw.to_string(), canonical.to_string()));
        }
        NormalizationMap::from_pairs(pairs)
    }

    /// A small hand-built starter table; not a complete clinical mapping.
    pub fn default_table() -> Self {
        NormalizationMap::from_tsv(DEFAULT_NORMALIZATION).expect("shipped normalization table is valid")
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

pub fn normalize_symptom(raw: &str, map: &NormalizationMap) -> String {
    let key = normalize_key(raw);
    map.map.get(&key).cloned().unwrap_or(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;

    fn span(s: usize, e: usize) -> TokenSpan {
        TokenSpan::new(0, s, e)
    }

    #[test]
    fn default_schema_declares_table_one() {
        let schema = Schema::default();
        assert_eq!(schema.event_types.keys().collect::<Vec<_>>(), ["COVID", "Symptom"]);
        let covid = schema.event_type(COVID).unwrap();
        assert_eq!(covid.argument("Assertion").unwrap().kind, ArgKind::Labeled);
        assert_eq!(covid.argument("Test_Status").unwrap().kind, ArgKind::Labeled);
        let sym = schema.event_type(SYMPTOM).unwrap();
        for name in ["Assertion", "Change", "Severity"] {
            assert_eq!(sym.argument(name).unwrap().kind, ArgKind::Labeled, "{name}");
        }
        for name in ["Anatomy", "Characteristics", "Duration", "Frequency"] {
            assert_eq!(sym.argument(name).unwrap().kind, ArgKind::SpanOnly, "{name}");
        }
        assert_eq!(sym.argument("Severity").unwrap().subtypes, ["mild", "moderate", "severe"]);
    }

    #[test]
    fn labeled_argument_union_uses_larger_assertion_set() {
        let labeled = Schema::default().labeled_arguments();
        let names: Vec<_> = labeled.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["Assertion", "Test_Status", "Change", "Severity"]);
        assert_eq!(labeled[0].1, ["present", "absent", "possible", "conditional", "hypothetical", "not_patient"]);
        assert_eq!(
            Schema::default().span_only_arguments(),
            ["Anatomy", "Characteristics", "Duration", "Frequency"]
        );
    }

    #[test]
    fn config_errors() {
        let err = load_schema(r#"{"event_types":{"X":[{"name":"A","kind":"labeled"}]}}"#).unwrap_err();
        assert!(matches!(err, SchemaError::EmptySubtypes { .. }));
        let err = load_schema(r#"{"event_types":{"X":[{"name":"A","kind":"weird"}]}}"#).unwrap_err();
        assert!(matches!(err, SchemaError::UnknownKind { .. }));
        let err = load_schema(
            r#"{"event_types":{"X":[{"name":"A","kind":"span_only"},{"name":"A","kind":"span_only"}]}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, SchemaError::DuplicateArgument { .. }));
        let err = load_schema(r#"{"event_types":{"X":[{"name":"A","kind":"span_only","subtypes":["a"]}]}}"#)
            .unwrap_err();
        assert!(matches!(err, SchemaError::UnexpectedSubtypes { .. }));
        assert!(matches!(load_schema("{"), Err(SchemaError::Json(_))));
    }

    #[test]
    fn covid_with_assertion_only_is_valid() {
        let schema = Schema::default();
        let e = Event::new(COVID, span(0, 1)).with_labeled("Assertion", span(1, 2), "present");
        assert!(validate_event(&e, &schema).is_empty());
        let e = Event::new(COVID, span(0, 1)).with_labeled("Test_Status", span(1, 2), "pending");
        assert!(validate_event(&e, &schema).is_empty());
    }

    #[test]
    fn covid_without_labeled_args_violates_group() {
        let v = validate_event(&Event::new(COVID, span(0, 1)), &Schema::default());
        assert_eq!(v.len(), 1);
        assert!(matches!(&v[0], Violation::MissingRequiredGroup { group, .. } if group == "status"));
    }

    #[test]
    fn unknown_subtype_and_type_and_kind() {
        let schema = Schema::default();
        let e = Event::new(SYMPTOM, span(0, 1))
            .with_labeled("Assertion", span(0, 1), "present")
            .with_labeled("Severity", span(1, 2), "extreme");
        assert_eq!(
            validate_event(&e, &schema),
            vec![Violation::UnknownSubtype {
                event_type: SYMPTOM.into(),
                arg_type: "Severity".into(),
                subtype: "extreme".into()
            }]
        );
        let v = validate_event(&Event::new("Drug", span(0, 1)), &schema);
        assert_eq!(v, vec![Violation::UnknownEventType { event_type: "Drug".into() }]);
        let e = Event::new(SYMPTOM, span(0, 1))
            .with_labeled("Assertion", span(0, 1), "present")
            .with_labeled("Anatomy", span(1, 2), "present");
        assert!(matches!(&validate_event(&e, &schema)[0], Violation::WrongKind { .. }));
    }

    fn doc_with(events: Vec<Event>) -> AnnotatedDocument {
        AnnotatedDocument { document: Document::new("d", "COVID test positive , dry cough and fever ."), events }
    }

    #[test]
    fn truncation_only_touches_covid() {
        let doc = doc_with(vec![
            Event::new(COVID, span(0, 2)).with_labeled("Test_Status", span(2, 3), "positive"),
            Event::new(SYMPTOM, span(4, 7)),
        ]);
        let out = truncate_covid_triggers(&doc);
        assert_eq!(out.events[0].trigger.span, span(0, 1));
        assert_eq!(out.events[0].labeled_args[0].span, span(2, 3));
        assert_eq!(out.events[1].trigger.span, span(4, 7));
        assert_eq!(truncate_covid_triggers(&out), out);
    }

    #[test]
    fn vocabulary_threshold_boundary() {
        let doc = |word: &str, n: usize| {
            let text = vec![word; n].join(" ");
            let events = (0..n).map(|i| Event::new(SYMPTOM, span(i, i + 1))).collect();
            AnnotatedDocument { document: Document::new(word, text), events }
        };
        let corpus = vec![doc("Cough", 12), doc("wheeze", 9)];
        let v = build_symptom_vocabulary(&corpus, 10);
        assert!(v.contains("cough"));
        assert!(!v.contains("wheeze"));
        assert!(build_symptom_vocabulary(&corpus, 9).contains("wheeze"));
        assert!(build_symptom_vocabulary(&[], 10).is_empty());
    }

    #[test]
    fn filtering() {
        let doc = doc_with(vec![
            Event::new(COVID, span(0, 1)).with_labeled("Test_Status", span(2, 3), "positive"),
            Event::new(SYMPTOM, span(5, 6)),
            Event::new(SYMPTOM, span(7, 8)),
        ]);
        let vocab = SymptomVocabulary { entries: ["cough".to_string()].into(), min_count: 1 };
        let out = filter_symptoms(&doc, &vocab);
        assert_eq!(out.events.len(), 2);
        assert_eq!(out.events[1].trigger.span, span(5, 6));
        let none = filter_symptoms(&doc, &SymptomVocabulary::default());
        assert_eq!(none.events.len(), 1);
        let covid_only = doc_with(vec![Event::new(COVID, span(0, 1))]);
        assert_eq!(filter_symptoms(&covid_only, &SymptomVocabulary::default()), covid_only);
    }

    #[test]
    fn normalization() {
        let m = NormalizationMap::default_table();
        assert_eq!(normalize_symptom("sob", &m), "shortness of breath");
        assert_eq!(normalize_symptom("Short  of breath", &m), "shortness of breath");
        assert_eq!(normalize_symptom("febrile", &m), "fever");
        assert_eq!(normalize_symptom("Fevers", &m), "fever");
        assert_eq!(normalize_symptom("pruritus", &m), "pruritus");
        let once = normalize_symptom("sob", &m);
        assert_eq!(normalize_symptom(&once, &m), once);
    }

    #[test]
    fn normalization_rejects_chains() {
        let err = NormalizationMap::from_pairs([("a", "b"), ("b", "c")]).unwrap_err();
        assert!(matches!(err, NormalizationError::NotFixedPoint { .. }));
        assert_eq!(NormalizationMap::from_tsv("sob shortness").unwrap_err(), NormalizationError::Malformed { line: 1 });
    }
}
