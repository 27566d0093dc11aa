//! Standoff-annotated clinical notes.
//!
//! Documents are tokenized with a rule-based splitter that keeps exact
//! character offsets, so every text-bound annotation in an `.ann` file can be
//! mapped onto a sentence-local [`TokenSpan`]. Offsets are counted in Unicode
//! scalar values, which is what BRAT writes.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Abbreviations whose trailing period neither splits off nor ends a sentence.
pub const DEFAULT_ABBREVIATIONS: &[&str] = &[
    "dr.", "mr.", "mrs.", "ms.", "pt.", "pts.", "hx.", "dx.", "tx.", "sx.", "rx.", "fx.", "approx.",
    "e.g.", "i.e.", "etc.", "vs.", "yo.", "y.o.", "b.i.d.", "t.i.d.", "q.d.", "p.r.n.", "p.o.",
    "no.", "st.", "jr.",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub char_start: usize,
    pub char_end: usize,
    pub sentence_index: usize,
    pub token_index: usize,
}

/// The six note categories sampled for annotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoteType {
    Telephone,
    OutpatientProgress,
    EmergencyDepartment,
    InpatientNursing,
    IntensiveCareUnit,
    GeneralInpatient,
}

impl NoteType {
    pub const ALL: [NoteType; 6] = [
        NoteType::Telephone,
        NoteType::OutpatientProgress,
        NoteType::EmergencyDepartment,
        NoteType::InpatientNursing,
        NoteType::IntensiveCareUnit,
        NoteType::GeneralInpatient,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NoteType::Telephone => "telephone",
            NoteType::OutpatientProgress => "outpatient_progress",
            NoteType::EmergencyDepartment => "emergency_department",
            NoteType::InpatientNursing => "inpatient_nursing",
            NoteType::IntensiveCareUnit => "intensive_care_unit",
            NoteType::GeneralInpatient => "general_inpatient",
        }
    }
}

impl fmt::Display for NoteType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NoteType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NoteType::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown note type {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    /// `None` when the corpus carries no note-type metadata for this document.
    pub note_type: Option<NoteType>,
    pub text: String,
    pub sentences: Vec<Vec<Token>>,
}

impl Document {
    pub fn new(doc_id: impl Into<String>, text: impl Into<String>) -> Self {
        Self::with_tokenizer(doc_id, text, &Tokenizer::default())
    }

    pub fn with_tokenizer(doc_id: impl Into<String>, text: impl Into<String>, tokenizer: &Tokenizer) -> Self {
        let text = text.into();
        let sentences = tokenizer.tokenize(&text);
        Document { doc_id: doc_id.into(), note_type: None, text, sentences }
    }

    pub fn sentence_len(&self, sentence_index: usize) -> usize {
        self.sentences.get(sentence_index).map_or(0, Vec::len)
    }

    /// Character range `[start, end)` covered by a span.
    pub fn char_range(&self, span: &TokenSpan) -> (usize, usize) {
        let sentence = &self.sentences[span.sentence_index];
        (sentence[span.start].char_start, sentence[span.end - 1].char_end)
    }

    /// Original text under a span, whitespace included.
    pub fn span_text(&self, span: &TokenSpan) -> String {
        let (start, end) = self.char_range(span);
        self.text.chars().skip(start).take(end - start).collect()
    }

    pub fn resolves(&self, span: &TokenSpan) -> bool {
        span.start < span.end && span.end <= self.sentence_len(span.sentence_index)
    }
}

/// Half-open token range `[start, end)` inside one sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenSpan {
    pub sentence_index: usize,
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(sentence_index: usize, start: usize, end: usize) -> Self {
        debug_assert!(start < end, "empty token span");
        TokenSpan { sentence_index, start, end }
    }

    pub fn width(&self) -> usize {
        self.end - self.start
    }

    /// Number of shared token positions; zero across sentences.
    pub fn overlap(&self, other: &TokenSpan) -> usize {
        if self.sentence_index != other.sentence_index {
            return 0;
        }
        self.end.min(other.end).saturating_sub(self.start.max(other.start))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trigger {
    pub event_type: String,
    pub span: TokenSpan,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledArg {
    pub arg_type: String,
    pub span: TokenSpan,
    pub subtype: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpanOnlyArg {
    pub arg_type: String,
    pub span: TokenSpan,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    pub trigger: Trigger,
    pub labeled_args: Vec<LabeledArg>,
    pub span_only_args: Vec<SpanOnlyArg>,
}

impl Event {
    pub fn new(event_type: impl Into<String>, span: TokenSpan) -> Self {
        Event {
            trigger: Trigger { event_type: event_type.into(), span },
            labeled_args: Vec::new(),
            span_only_args: Vec::new(),
        }
    }

    pub fn with_labeled(mut self, arg_type: impl Into<String>, span: TokenSpan, subtype: impl Into<String>) -> Self {
        self.labeled_args.push(LabeledArg { arg_type: arg_type.into(), span, subtype: subtype.into() });
        self
    }

    pub fn with_span_only(mut self, arg_type: impl Into<String>, span: TokenSpan) -> Self {
        self.span_only_args.push(SpanOnlyArg { arg_type: arg_type.into(), span });
        self
    }

    pub fn event_type(&self) -> &str {
        &self.trigger.event_type
    }

    /// Every span of the event, trigger first.
    pub fn spans(&self) -> impl Iterator<Item = &TokenSpan> {
        std::iter::once(&self.trigger.span)
            .chain(self.labeled_args.iter().map(|a| &a.span))
            .chain(self.span_only_args.iter().map(|a| &a.span))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedDocument {
    pub document: Document,
    pub events: Vec<Event>,
}

impl AnnotatedDocument {
    pub fn unannotated(document: Document) -> Self {
        AnnotatedDocument { document, events: Vec::new() }
    }

    pub fn doc_id(&self) -> &str {
        &self.document.doc_id
    }

    /// Lowercased trigger text with internal whitespace collapsed.
    pub fn trigger_text(&self, event: &Event) -> String {
        normalize_whitespace(&self.document.span_text(&event.trigger.span)).to_lowercase()
    }

    pub fn events_in_sentence(&self, sentence_index: usize) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.trigger.span.sentence_index == sentence_index)
    }
}

pub(crate) fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

// ---------------------------------------------------------------------------
// Tokenizer

/// Whitespace/punctuation tokenizer with sentence splitting at `.`, `!`, `?`
/// and newlines.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    abbreviations: HashSet<String>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer::with_abbreviations(DEFAULT_ABBREVIATIONS.iter().copied())
    }
}

fn is_edge_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

fn is_terminator(text: &str) -> bool {
    matches!(text, "." | "!" | "?")
}

fn is_closer(text: &str) -> bool {
    matches!(text, ")" | "]" | "}" | "\"" | "'")
}

impl Tokenizer {
    pub fn with_abbreviations<I, S>(abbreviations: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Tokenizer {
            abbreviations: abbreviations.into_iter().map(|a| a.as_ref().to_lowercase()).collect(),
        }
    }

    /// Reads one abbreviation per line; blank lines and `#` comments are skipped.
    pub fn from_abbreviation_list(text: &str) -> Self {
        Tokenizer::with_abbreviations(
            text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    fn is_abbreviation(&self, chars: &[char]) -> bool {
        chars.last() == Some(&'.') && self.abbreviations.contains(&chars.iter().collect::<String>().to_lowercase())
    }

    pub fn tokenize(&self, text: &str) -> Vec<Vec<Token>> {
        let chars: Vec<char> = text.chars().collect();
        let mut sentences: Vec<Vec<Token>> = Vec::new();
        let mut current: Vec<(usize, usize)> = Vec::new();
        let mut pending_break = false;

        let flush = |current: &mut Vec<(usize, usize)>, sentences: &mut Vec<Vec<Token>>| {
            if current.is_empty() {
                return;
            }
            let sentence_index = sentences.len();
            sentences.push(
                current
                    .drain(..)
                    .enumerate()
                    .map(|(token_index, (s, e))| Token {
                        text: chars[s..e].iter().collect(),
                        char_start: s,
                        char_end: e,
                        sentence_index,
                        token_index,
                    })
                    .collect(),
            );
        };

        let mut i = 0;
        while i < chars.len() {
            if chars[i].is_whitespace() {
                if chars[i] == '\n' {
                    flush(&mut current, &mut sentences);
                    pending_break = false;
                }
                i += 1;
                continue;
            }
            let run_start = i;
            while i < chars.len() && !chars[i].is_whitespace() {
                i += 1;
            }
            for (s, e) in self.split_run(&chars, run_start, i) {
                let piece: String = chars[s..e].iter().collect();
                if pending_break && !is_terminator(&piece) && !is_closer(&piece) {
                    flush(&mut current, &mut sentences);
                    pending_break = false;
                }
                current.push((s, e));
                if is_terminator(&piece) {
                    pending_break = true;
                }
            }
        }
        flush(&mut current, &mut sentences);
        sentences
    }

    /// Splits one whitespace-free run into `(start, end)` char ranges.
    fn split_run(&self, chars: &[char], start: usize, end: usize) -> Vec<(usize, usize)> {
        let mut pieces = Vec::new();
        let mut a = start;
        while a < end && is_edge_punct(chars[a]) {
            pieces.push((a, a + 1));
            a += 1;
        }
        if a == end {
            return pieces;
        }
        let mut b = end;
        let mut trailing = Vec::new();
        if !self.is_abbreviation(&chars[a..b]) {
            while b > a && is_edge_punct(chars[b - 1]) {
                if chars[b - 1] == '.' && self.is_abbreviation(&chars[a..b]) {
                    break;
                }
                trailing.push((b - 1, b));
                b -= 1;
            }
        }
        pieces.push((a, b));
        pieces.extend(trailing.into_iter().rev());
        pieces
    }
}

/// Tokenizes with the default abbreviation list.
pub fn tokenize(text: &str) -> Vec<Vec<Token>> {
    Tokenizer::default().tokenize(text)
}

// ---------------------------------------------------------------------------
// Standoff parsing

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StandoffError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate annotation id {id}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: reference to unknown annotation {id}")]
    DanglingReference { line: usize, id: String },
    #[error("annotation {id}: character span {start}..{end} crosses a sentence boundary")]
    CrossSentence { id: String, start: usize, end: usize },
    #[error("annotation {id}: character span {start}..{end} covers no tokens")]
    EmptySpan { id: String, start: usize, end: usize },
}

struct TextBound {
    kind: String,
    start: usize,
    end: usize,
}

struct EventLine {
    line: usize,
    event_type: String,
    trigger: String,
    args: Vec<(String, String)>,
}

fn malformed(line: usize, message: impl Into<String>) -> StandoffError {
    StandoffError::Malformed { line, message: message.into() }
}

fn check_id(line: usize, id: &str, prefix: char) -> Result<(), StandoffError> {
    let mut chars = id.chars();
    let ok = chars.next() == Some(prefix)
        && id.len() > 1
        && id[1..].bytes().all(|b| b.is_ascii_digit())
        && id[1..].parse::<u64>().is_ok_and(|n| n > 0);
    if ok {
        Ok(())
    } else {
        Err(malformed(line, format!("invalid annotation id {id:?}")))
    }
}

/// Drops the numeric suffix BRAT appends to repeated roles (`Anatomy2`).
fn base_role(role: &str) -> &str {
    role.trim_end_matches(|c: char| c.is_ascii_digit())
}

/// Parses with the default tokenizer.
pub fn parse_standoff(doc_id: &str, txt: &str, ann: &str) -> Result<AnnotatedDocument, StandoffError> {
    parse_standoff_with(doc_id, txt, ann, &Tokenizer::default())
}

pub fn parse_standoff_with(
    doc_id: &str,
    txt: &str,
    ann: &str,
    tokenizer: &Tokenizer,
) -> Result<AnnotatedDocument, StandoffError> {
    let document = Document::with_tokenizer(doc_id, txt, tokenizer);
    let text_len = txt.chars().count();

    let mut text_bounds: HashMap<String, TextBound> = HashMap::new();
    let mut event_lines: Vec<EventLine> = Vec::new();
    let mut event_ids: HashSet<String> = HashSet::new();
    // text-bound id -> (arg type, subtype)
    let mut attributes: HashMap<String, (String, String)> = HashMap::new();
    let mut attribute_ids: HashSet<String> = HashSet::new();
    let mut attribute_refs: Vec<(usize, String)> = Vec::new();

    for (idx, raw) in ann.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        match raw.as_bytes()[0] {
            b'T' => {
                let mut fields = raw.splitn(3, '\t');
                let id = fields.next().unwrap_or_default();
                check_id(line, id, 'T')?;
                let body = fields.next().ok_or_else(|| malformed(line, "text-bound line needs a type and offsets"))?;
                if fields.next().is_none() {
                    return Err(malformed(line, "text-bound line is missing its covered text"));
                }
                if body.contains(';') {
                    return Err(malformed(line, "discontinuous spans are not supported"));
                }
                let parts: Vec<&str> = body.split(' ').collect();
                if parts.len() != 3 || parts[0].is_empty() {
                    return Err(malformed(line, format!("expected `<Type> <start> <end>`, got {body:?}")));
                }
                let start: usize = parts[1].parse().map_err(|_| malformed(line, format!("bad start offset {:?}", parts[1])))?;
                let end: usize = parts[2].parse().map_err(|_| malformed(line, format!("bad end offset {:?}", parts[2])))?;
                if start >= end || end > text_len {
                    return Err(malformed(line, format!("offsets {start}..{end} are invalid for a text of {text_len} characters")));
                }
                let bound = TextBound { kind: parts[0].to_string(), start, end };
                if text_bounds.insert(id.to_string(), bound).is_some() {
                    return Err(StandoffError::DuplicateId { line, id: id.to_string() });
                }
            }
            b'E' => {
                let (id, body) = raw.split_once('\t').ok_or_else(|| malformed(line, "event line needs a tab after its id"))?;
                check_id(line, id, 'E')?;
                if !event_ids.insert(id.to_string()) {
                    return Err(StandoffError::DuplicateId { line, id: id.to_string() });
                }
                let mut pairs = body.split(' ').filter(|p| !p.is_empty()).map(|p| {
                    p.split_once(':')
                        .filter(|(role, target)| !role.is_empty() && !target.is_empty())
                        .map(|(role, target)| (role.to_string(), target.to_string()))
                        .ok_or_else(|| malformed(line, format!("expected `<Role>:<Id>`, got {p:?}")))
                });
                let (event_type, trigger) = pairs.next().ok_or_else(|| malformed(line, "event line has no trigger"))??;
                let args = pairs.collect::<Result<Vec<_>, _>>()?;
                event_lines.push(EventLine { line, event_type, trigger, args });
            }
            b'A' => {
                let (id, body) = raw.split_once('\t').ok_or_else(|| malformed(line, "attribute line needs a tab after its id"))?;
                check_id(line, id, 'A')?;
                if !attribute_ids.insert(id.to_string()) {
                    return Err(StandoffError::DuplicateId { line, id: id.to_string() });
                }
                let parts: Vec<&str> = body.split(' ').collect();
                if parts.len() != 3 {
                    return Err(malformed(line, format!("expected `<ArgType>Val <Id> <subtype>`, got {body:?}")));
                }
                let arg_type = parts[0]
                    .strip_suffix("Val")
                    .filter(|t| !t.is_empty())
                    .ok_or_else(|| malformed(line, format!("attribute name {:?} must end in `Val`", parts[0])))?;
                attribute_refs.push((line, parts[1].to_string()));
                attributes.insert(parts[1].to_string(), (arg_type.to_string(), parts[2].to_string()));
            }
            _ => return Err(malformed(line, format!("unsupported annotation kind in {raw:?}"))),
        }
    }

    for (line, target) in &attribute_refs {
        if !text_bounds.contains_key(target) {
            return Err(StandoffError::DanglingReference { line: *line, id: target.clone() });
        }
    }

    let resolve = |id: &str, bound: &TextBound| snap_to_tokens(&document, id, bound);

    let mut events = Vec::with_capacity(event_lines.len());
    for ev in &event_lines {
        let trigger_bound = text_bounds
            .get(&ev.trigger)
            .ok_or_else(|| StandoffError::DanglingReference { line: ev.line, id: ev.trigger.clone() })?;
        if trigger_bound.kind != ev.event_type {
            log::warn!(
                "{doc_id}: event on line {} has type {} but trigger {} is typed {}",
                ev.line, ev.event_type, ev.trigger, trigger_bound.kind
            );
        }
        let trigger_span = resolve(&ev.trigger, trigger_bound)?;
        let mut event = Event::new(ev.event_type.clone(), trigger_span);
        for (role, target) in &ev.args {
            let bound = text_bounds
                .get(target)
                .ok_or_else(|| StandoffError::DanglingReference { line: ev.line, id: target.clone() })?;
            let span = resolve(target, bound)?;
            if span.sentence_index != trigger_span.sentence_index {
                return Err(StandoffError::CrossSentence { id: target.clone(), start: bound.start, end: bound.end });
            }
            let role = base_role(role);
            match attributes.get(target) {
                Some((arg_type, subtype)) if arg_type == role => {
                    event.labeled_args.push(LabeledArg { arg_type: role.to_string(), span, subtype: subtype.clone() });
                }
                Some((arg_type, _)) => {
                    log::warn!("{doc_id}: attribute {arg_type}Val on {target} does not match role {role}; treating as span-only");
                    event.span_only_args.push(SpanOnlyArg { arg_type: role.to_string(), span });
                }
                None => event.span_only_args.push(SpanOnlyArg { arg_type: role.to_string(), span }),
            }
        }
        events.push(event);
    }

    Ok(AnnotatedDocument { document, events })
}

fn snap_to_tokens(document: &Document, id: &str, bound: &TextBound) -> Result<TokenSpan, StandoffError> {
    let covered: Vec<&Token> = document
        .sentences
        .iter()
        .flatten()
        .filter(|t| t.char_start < bound.end && t.char_end > bound.start)
        .collect();
    let (first, last) = match (covered.first(), covered.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(StandoffError::EmptySpan { id: id.to_string(), start: bound.start, end: bound.end }),
    };
    if first.sentence_index != last.sentence_index {
        return Err(StandoffError::CrossSentence { id: id.to_string(), start: bound.start, end: bound.end });
    }
    if first.char_start != bound.start || last.char_end != bound.end {
        // partial first/last token coverage is widened; leading/trailing
        // whitespace inside the annotation is not worth a warning
        if first.char_start > bound.start || last.char_end < bound.end {
            log::debug!("{}: {id} spans whitespace beyond its tokens", document.doc_id);
        }
        if first.char_start < bound.start || last.char_end > bound.end {
            log::warn!(
                "{}: {id} ({}..{}) partially covers a token; snapped to {}..{}",
                document.doc_id, bound.start, bound.end, first.char_start, last.char_end
            );
        }
    }
    Ok(TokenSpan::new(first.sentence_index, first.token_index, last.token_index + 1))
}

// ---------------------------------------------------------------------------
// Standoff serialization

/// Writes `(txt, ann)`. Ids are assigned in event order: each event emits its
/// trigger and argument text-bound lines, then its `E` line, then `A` lines for
/// its labeled arguments.
pub fn serialize_standoff(doc: &AnnotatedDocument) -> (String, String) {
    let document = &doc.document;
    let mut ann = String::new();
    let (mut next_t, mut next_e, mut next_a) = (1usize, 1usize, 1usize);

    let mut text_bound = |ann: &mut String, kind: &str, span: &TokenSpan| -> String {
        let (start, end) = document.char_range(span);
        let id = format!("T{next_t}");
        next_t += 1;
        ann.push_str(&format!("{id}\t{kind} {start} {end}\t{}\n", document.span_text(span)));
        id
    };

    for event in &doc.events {
        let trigger_id = text_bound(&mut ann, &event.trigger.event_type, &event.trigger.span);
        let mut role_counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut role = |name: &str| -> String {
            let n = role_counts.entry(name.to_string()).or_insert(0);
            *n += 1;
            if *n == 1 {
                name.to_string()
            } else {
                format!("{name}{n}")
            }
        };
        let mut parts = vec![format!("{}:{trigger_id}", event.trigger.event_type)];
        let mut attrs = Vec::new();
        for arg in &event.labeled_args {
            let id = text_bound(&mut ann, &arg.arg_type, &arg.span);
            parts.push(format!("{}:{id}", role(&arg.arg_type)));
            attrs.push((arg.arg_type.as_str(), id, arg.subtype.as_str()));
        }
        for arg in &event.span_only_args {
            let id = text_bound(&mut ann, &arg.arg_type, &arg.span);
            parts.push(format!("{}:{id}", role(&arg.arg_type)));
        }
        ann.push_str(&format!("E{next_e}\t{}\n", parts.join(" ")));
        next_e += 1;
        for (arg_type, id, subtype) in attrs {
            ann.push_str(&format!("A{next_a}\t{arg_type}Val {id} {subtype}\n"));
            next_a += 1;
        }
    }
    (document.text.clone(), ann)
}

// ---------------------------------------------------------------------------
// Corpus directories

/// Optional per-directory metadata: `doc_id<TAB>note_type` lines.
pub const NOTE_TYPES_FILE: &str = "note_types.tsv";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Standoff { path: PathBuf, source: StandoffError },
    #[error("{path}: {message}")]
    Metadata { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

/// Reads every `<id>.txt` in `dir` with its `<id>.ann` (missing `.ann` means
/// no events). Documents are returned sorted by id.
pub fn read_corpus_dir(dir: &Path) -> Result<Vec<AnnotatedDocument>, CorpusError> {
    read_corpus_dir_with(dir, &Tokenizer::default())
}

pub fn read_corpus_dir_with(dir: &Path, tokenizer: &Tokenizer) -> Result<Vec<AnnotatedDocument>, CorpusError> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e == "txt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();

    let note_types = read_note_types(dir)?;
    let mut docs = Vec::with_capacity(ids.len());
    for id in ids {
        let txt_path = dir.join(format!("{id}.txt"));
        let ann_path = dir.join(format!("{id}.ann"));
        let txt = fs::read_to_string(&txt_path).map_err(io_err(&txt_path))?;
        let ann = if ann_path.exists() {
            fs::read_to_string(&ann_path).map_err(io_err(&ann_path))?
        } else {
            String::new()
        };
        let mut doc = parse_standoff_with(&id, &txt, &ann, tokenizer)
            .map_err(|source| CorpusError::Standoff { path: ann_path.clone(), source })?;
        doc.document.note_type = note_types.get(&id).copied();
        docs.push(doc);
    }
    Ok(docs)
}

fn read_note_types(dir: &Path) -> Result<HashMap<String, NoteType>, CorpusError> {
    let path = dir.join(NOTE_TYPES_FILE);
    if !path.exists() {
        return Ok(HashMap::new());
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, kind) = line.split_once('\t').ok_or_else(|| CorpusError::Metadata {
            path: path.clone(),
            message: format!("line {}: expected `doc_id<TAB>note_type`", i + 1),
        })?;
        let kind = kind.trim().parse().map_err(|message| CorpusError::Metadata { path: path.clone(), message })?;
        map.insert(id.to_string(), kind);
    }
    Ok(map)
}

pub fn write_corpus_dir(dir: &Path, docs: &[AnnotatedDocument]) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut meta = String::new();
    for doc in docs {
        let (txt, ann) = serialize_standoff(doc);
        let txt_path = dir.join(format!("{}.txt", doc.doc_id()));
        let ann_path = dir.join(format!("{}.ann", doc.doc_id()));
        fs::write(&txt_path, txt).map_err(io_err(&txt_path))?;
        fs::write(&ann_path, ann).map_err(io_err(&ann_path))?;
        if let Some(kind) = doc.document.note_type {
            meta.push_str(&format!("{}\t{kind}\n", doc.doc_id()));
        }
    }
    if !meta.is_empty() {
        let path = dir.join(NOTE_TYPES_FILE);
        fs::write(&path, meta).map_err(io_err(&path))?;
    }
    Ok(())
}
