//! Clinical event annotation toolkit.
//!
//! * [`corpus`]: standoff parsing, serialization and tokenization.
//! * [`schema`]: the COVID/Symptom annotation scheme and corpus preparation.
//! * [`scoring`]: slot-filling precision/recall/F1 and annotator agreement.
//! * [`encoder`]: token embeddings and the bidirectional LSTM encoder.
//! * [`spanmodel`]: the span-based event extractor, its training and decoding.
//! * [`prediction`]: test-positivity prediction from extracted symptoms and
//!   structured fields under repeated hold-out.
//! * [`synthetic`]: seeded desk-scale corpora and patient timelines.

pub mod corpus;
pub mod encoder;
pub mod prediction;
pub mod schema;
pub mod scoring;
pub mod seed;
pub mod spanmodel;
pub mod synthetic;
pub mod tensor;

pub use corpus::{AnnotatedDocument, Document, Event, LabeledArg, NoteType, SpanOnlyArg, Token, TokenSpan, Trigger};
pub use schema::Schema;
pub use scoring::{ScoreReport, TriggerMatchMode};
