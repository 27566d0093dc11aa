//! Seeded synthetic notes, annotations and patient timelines.
//!
//! Notes are assembled from sentence templates that carry their own gold
//! events, so every generated document is schema-valid by construction.
//! Each patient gets a final COVID test; notes in the week before it mention
//! a few signal symptoms more often when the test is positive. Structured
//! vitals are drawn independently of the outcome.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{write_corpus_dir, AnnotatedDocument, CorpusError, Document, Event, NoteType, TokenSpan};
use crate::encoder::{hashed_table, EmbeddingTable};
use crate::prediction::{timelines_to_jsonl, AggregationSpec, Aggregator, NoteLabel, NoteRecord, Observation, PatientTimeline, TestRecord, TestResult};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub patients: usize,
    /// Share of patients whose final test is positive; the same share gets
    /// negative tests and the rest have no test at all.
    pub positive_fraction: f64,
    pub untested_fraction: f64,
    /// Notes in the week before the final test.
    pub notes_per_patient: usize,
    /// Note types cycle in this order within a patient.
    pub note_types: Vec<NoteType>,
    /// Symptoms (surface forms) whose presence depends on the outcome.
    pub signal_symptoms: Vec<String>,
    pub noise_symptoms: Vec<String>,
    pub present_if_positive: f64,
    pub present_if_negative: f64,
    pub present_noise: f64,
    pub denied: f64,
    pub covid_mention: f64,
    pub filler_sentences: usize,
    /// Probability that a vital sign is recorded at a note.
    pub vitals_recorded: f64,
    pub embedding_dim: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        SyntheticSpec {
            patients: 60,
            positive_fraction: 0.4,
            untested_fraction: 0.1,
            notes_per_patient: 2,
            note_types: vec![NoteType::Telephone, NoteType::OutpatientProgress],
            signal_symptoms: s(&["fever", "cough", "loss of taste"]),
            noise_symptoms: s(&["headache", "fatigue", "sore throat", "nausea"]),
            present_if_positive: 0.7,
            present_if_negative: 0.15,
            present_noise: 0.3,
            denied: 0.3,
            covid_mention: 0.5,
            filler_sentences: 1,
            vitals_recorded: 0.8,
            embedding_dim: 16,
        }
    }
}

/// Surface variants each symptom may be written as.
fn variants(symptom: &str) -> &'static [&'static str] {
    match symptom {
        "fever" => &["fever", "fevers", "febrile"],
        "cough" => &["cough", "coughing"],
        "shortness of breath" => &["shortness of breath", "sob", "dyspnea"],
        "headache" => &["headache", "headaches"],
        "fatigue" => &["fatigue", "tired"],
        "loss of taste" => &["loss of taste", "ageusia"],
        "myalgia" => &["myalgia", "body aches"],
        _ => &[],
    }
}

const SEVERITY: &[&str] = &["mild", "moderate", "severe"];
const CHANGE: &[&str] = &["improving", "worsening", "resolved"];
const CHARACTERISTICS: &[&str] = &["dry", "productive", "intermittent"];
const DURATION: &[&[&str]] = &[&["two", "days"], &["one", "week"], &["three", "days"]];
const FREQUENCY: &[&str] = &["daily", "nightly"];
const ANATOMY: &[&str] = &["chest", "throat", "head"];
const FILLERS: &[&[&str]] = &[
    &["Follow", "up", "in", "two", "weeks", "."],
    &["Vitals", "reviewed", "."],
    &["Plan", "discussed", "with", "patient", "."],
];

/// Tokens of one sentence with its events (sentence index 0, local spans).
#[derive(Debug, Clone)]
struct Draft {
    tokens: Vec<String>,
    events: Vec<Event>,
}

fn span(start: usize, end: usize) -> TokenSpan {
    TokenSpan::new(0, start, end)
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mention {
    Present,
    Absent,
    Other,
}

fn pick<'a, T: ?Sized>(rng: &mut ChaCha8Rng, items: &'a [&'a T]) -> &'a T {
    items.choose(rng).expect("non-empty choice list")
}

fn surface(rng: &mut ChaCha8Rng, symptom: &str) -> Vec<String> {
    let forms = variants(symptom);
    if forms.is_empty() {
        words(symptom)
    } else {
        words(pick(rng, forms))
    }
}

fn symptom_draft(rng: &mut ChaCha8Rng, symptom: &str, mention: Mention) -> Draft {
    let sym = surface(rng, symptom);
    let w = sym.len();
    let mut tokens: Vec<String>;
    let event;
    match mention {
        Mention::Absent => {
            tokens = words("Denies");
            tokens.extend(sym);
            event = Event::new("Symptom", span(1, 1 + w)).with_labeled("Assertion", span(0, 1), "absent");
        }
        Mention::Other => {
            if rng.random_bool(0.5) {
                tokens = words("Possible");
                tokens.extend(sym);
                tokens.extend(words("in the"));
                tokens.push(pick(rng, ANATOMY).to_string());
                event = Event::new("Symptom", span(1, 1 + w))
                    .with_labeled("Assertion", span(0, 1), "possible")
                    .with_span_only("Anatomy", span(w + 3, w + 4));
            } else {
                tokens = words("Mother has");
                tokens.extend(sym);
                event = Event::new("Symptom", span(2, 2 + w)).with_labeled("Assertion", span(0, 1), "not_patient");
            }
        }
        Mention::Present => match rng.random_range(0..5) {
            0 => {
                tokens = words("Patient reports");
                tokens.extend(sym);
                event = Event::new("Symptom", span(2, 2 + w)).with_labeled("Assertion", span(1, 2), "present");
            }
            1 => {
                tokens = words("Patient has");
                tokens.push(pick(rng, SEVERITY).to_string());
                tokens.extend(sym);
                event = Event::new("Symptom", span(3, 3 + w))
                    .with_labeled("Assertion", span(1, 2), "present")
                    .with_labeled("Severity", span(2, 3), tokens[2].clone());
            }
            2 => {
                tokens = words("Patient reports");
                tokens.push(pick(rng, CHARACTERISTICS).to_string());
                tokens.extend(sym);
                tokens.push("for".into());
                let duration = *DURATION.choose(rng).expect("durations");
                tokens.extend(duration.iter().map(|s| s.to_string()));
                event = Event::new("Symptom", span(3, 3 + w))
                    .with_labeled("Assertion", span(1, 2), "present")
                    .with_span_only("Characteristics", span(2, 3))
                    .with_span_only("Duration", span(4 + w, 6 + w));
            }
            3 => {
                tokens = sym;
                tokens.push("is".into());
                let change = pick(rng, CHANGE);
                tokens.push(change.to_string());
                event = Event::new("Symptom", span(0, w))
                    .with_labeled("Assertion", span(0, w), "present")
                    .with_labeled("Change", span(w + 1, w + 2), change);
            }
            _ => {
                tokens = words("Endorses");
                tokens.extend(sym);
                tokens.push(pick(rng, FREQUENCY).to_string());
                event = Event::new("Symptom", span(1, 1 + w))
                    .with_labeled("Assertion", span(0, 1), "present")
                    .with_span_only("Frequency", span(1 + w, 2 + w));
            }
        },
    }
    tokens.push(".".into());
    Draft { tokens, events: vec![event] }
}

fn covid_draft(rng: &mut ChaCha8Rng) -> Draft {
    let (text, event) = match rng.random_range(0..3) {
        0 => ("COVID-19 test pending .", Event::new("COVID", span(0, 2)).with_labeled("Test_Status", span(2, 3), "pending")),
        1 => ("Concern for COVID-19 infection .", Event::new("COVID", span(2, 4)).with_labeled("Assertion", span(0, 1), "possible")),
        _ => (
            "Will order COVID-19 test .",
            Event::new("COVID", span(2, 4)).with_labeled("Test_Status", span(0, 2), "not_ordered"),
        ),
    };
    Draft { tokens: words(text), events: vec![event] }
}

fn filler_draft(rng: &mut ChaCha8Rng) -> Draft {
    let tokens = FILLERS.choose(rng).expect("fillers").iter().map(|s| s.to_string()).collect();
    Draft { tokens, events: Vec::new() }
}

/// Joins drafts into a document, moving each draft's events to its sentence.
fn assemble(doc_id: &str, note_type: Option<NoteType>, drafts: Vec<Draft>) -> AnnotatedDocument {
    let text = drafts.iter().map(|d| d.tokens.join(" ")).collect::<Vec<_>>().join(" ");
    let mut document = Document::new(doc_id, text);
    document.note_type = note_type;
    debug_assert_eq!(document.sentences.len(), drafts.len(), "one sentence per draft");
    let mut events = Vec::new();
    for (si, draft) in drafts.into_iter().enumerate() {
        debug_assert_eq!(document.sentence_len(si), draft.tokens.len());
        for mut event in draft.events {
            event.trigger.span.sentence_index = si;
            for a in &mut event.labeled_args {
                a.span.sentence_index = si;
            }
            for a in &mut event.span_only_args {
                a.span.sentence_index = si;
            }
            events.push(event);
        }
    }
    AnnotatedDocument { document, events }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub corpus: Vec<AnnotatedDocument>,
    pub timelines: Vec<PatientTimeline>,
    /// The label each note was generated under.
    pub note_labels: BTreeMap<String, NoteLabel>,
    pub embeddings: EmbeddingTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Positive,
    Negative,
    Untested,
}

fn note_text(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, label: NoteLabel) -> Vec<Draft> {
    let mut drafts = Vec::new();
    let mut mention = |rng: &mut ChaCha8Rng, symptom: &str, p_present: f64| {
        let u: f64 = rng.random();
        let kind = if u < p_present {
            Some(Mention::Present)
        } else if u < p_present + spec.denied {
            Some(Mention::Absent)
        } else if u < p_present + spec.denied + 0.05 {
            Some(Mention::Other)
        } else {
            None
        };
        if let Some(kind) = kind {
            drafts.push(symptom_draft(rng, symptom, kind));
        }
    };
    let p_signal = if label == NoteLabel::Positive { spec.present_if_positive } else { spec.present_if_negative };
    for symptom in &spec.signal_symptoms {
        mention(rng, symptom, p_signal);
    }
    for symptom in &spec.noise_symptoms {
        mention(rng, symptom, spec.present_noise);
    }
    if rng.random_bool(spec.covid_mention) {
        drafts.push(covid_draft(rng));
    }
    for _ in 0..spec.filler_sentences {
        drafts.push(filler_draft(rng));
    }
    drafts.shuffle(rng);
    drafts
}

const VITALS: [(&str, f64, f64); 3] = [("temperature", 37.0, 0.5), ("heart_rate", 80.0, 10.0), ("spo2", 97.0, 1.5)];

/// Aggregators for the generated vitals: highest temperature and heart
/// rate, lowest oxygen saturation.
pub fn vitals_aggregation() -> AggregationSpec {
    let fields = VITALS
        .iter()
        .map(|(field, _, _)| {
            let agg = if *field == "spo2" { Aggregator::Min } else { Aggregator::Max };
            (field.to_string(), agg)
        })
        .collect();
    AggregationSpec { fields }
}

pub fn make_synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> SyntheticData {
    assert!(!spec.note_types.is_empty(), "at least one note type");
    let mut rng = seed::rng(seed, "synthetic.corpus");
    let mut corpus = Vec::new();
    let mut timelines = Vec::new();
    let mut note_labels = BTreeMap::new();

    for p in 0..spec.patients {
        let patient_id = format!("p{p:04}");
        let u: f64 = rng.random();
        let outcome = if u < spec.untested_fraction {
            Outcome::Untested
        } else if u < spec.untested_fraction + spec.positive_fraction {
            Outcome::Positive
        } else {
            Outcome::Negative
        };
        let test_day = 30.0 + rng.random_range(0..30) as f64;
        let mut tests = Vec::new();
        if outcome != Outcome::Untested {
            if rng.random_bool(0.3) {
                tests.push(TestRecord { time: test_day - 20.0, result: TestResult::Negative });
            }
            let result = if outcome == Outcome::Positive { TestResult::Positive } else { TestResult::Negative };
            tests.push(TestRecord { time: test_day, result });
        }
        let before = match outcome {
            Outcome::Positive => NoteLabel::Positive,
            Outcome::Negative => NoteLabel::Negative,
            Outcome::Untested => NoteLabel::None,
        };

        // notes inside the week before the final test, then one afterwards
        let mut note_times: Vec<(f64, NoteLabel)> = (0..spec.notes_per_patient)
            .map(|_| (test_day - rng.random_range(0.5..6.5), before))
            .collect();
        note_times.sort_by(|a, b| a.0.total_cmp(&b.0));
        note_times.push((test_day + rng.random_range(1.0..5.0), NoteLabel::None));

        let mut notes = Vec::new();
        let mut observations = Vec::new();
        for (i, (time, label)) in note_times.into_iter().enumerate() {
            let doc_id = format!("{patient_id}_n{i}");
            let note_type = spec.note_types[i % spec.note_types.len()];
            let drafts = note_text(&mut rng, spec, label);
            corpus.push(assemble(&doc_id, Some(note_type), drafts));
            note_labels.insert(doc_id.clone(), label);
            notes.push(NoteRecord { time, note_type, doc_id });
            for (field, mean, sd) in VITALS {
                if rng.random_bool(spec.vitals_recorded) {
                    let value = Normal::new(mean, sd).expect("valid normal").sample(&mut rng);
                    observations.push(Observation { time, field: field.to_string(), value });
                }
            }
        }
        timelines.push(PatientTimeline { patient_id, tests, notes, observations });
    }
    let embeddings = hashed_table(&corpus, spec.embedding_dim, seed::derive(seed, "synthetic.embeddings"));
    SyntheticData { corpus, timelines, note_labels, embeddings }
}

/// `n` one-sentence documents, each carrying at least one event: a small
/// training set for the extractor.
pub fn synthetic_sentences(n: usize, seed: u64) -> Vec<AnnotatedDocument> {
    let mut rng = seed::rng(seed, "synthetic.sentences");
    let symptoms = ["fever", "cough", "shortness of breath", "headache", "fatigue", "loss of taste", "myalgia", "chills"];
    (0..n)
        .map(|i| {
            let draft = if rng.random_bool(0.2) {
                covid_draft(&mut rng)
            } else {
                let symptom = pick(&mut rng, &symptoms);
                let mention = *[Mention::Present, Mention::Present, Mention::Absent, Mention::Other].choose(&mut rng).expect("mentions");
                symptom_draft(&mut rng, symptom, mention)
            };
            assemble(&format!("s{i:03}"), Some(NoteType::Telephone), vec![draft])
        })
        .collect()
}

impl SyntheticData {
    /// Writes `corpus/`, `embeddings.txt`, `timelines.jsonl`, `note_labels.tsv`
    /// and `aggregation.json`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), CorpusError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| CorpusError::Io { path, source }
        };
        write_corpus_dir(&dir.join("corpus"), &self.corpus)?;
        let emb = dir.join("embeddings.txt");
        std::fs::write(&emb, self.embeddings.to_text()).map_err(io(&emb))?;
        let tl = dir.join("timelines.jsonl");
        std::fs::write(&tl, timelines_to_jsonl(&self.timelines)).map_err(io(&tl))?;
        let mut labels = String::from("doc_id\tlabel\n");
        for (doc, label) in &self.note_labels {
            let name = match label {
                NoteLabel::None => "none",
                NoteLabel::Positive => "positive",
                NoteLabel::Negative => "negative",
            };
            let _ = writeln!(labels, "{doc}\t{name}");
        }
        let lp = dir.join("note_labels.tsv");
        std::fs::write(&lp, labels).map_err(io(&lp))?;
        let ap = dir.join("aggregation.json");
        let agg = serde_json::to_string_pretty(&vitals_aggregation()).expect("aggregation serializes");
        std::fs::write(&ap, agg + "\n").map_err(io(&ap))?;
        Ok(())
    }
}
