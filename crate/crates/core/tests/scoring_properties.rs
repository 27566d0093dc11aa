use std::collections::BTreeSet;

use clinevent::corpus::{AnnotatedDocument, Document, Event, TokenSpan};
use clinevent::scoring::{agreement_report, score_documents, Counts, SlotKind, TriggerMatchMode};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_corpus(rng: &mut ChaCha8Rng, docs: usize) -> Vec<AnnotatedDocument> {
    (0..docs)
        .map(|d| {
            let document = Document::new(format!("d{d}"), "a b c d e f g h . i j k l m n .");
            let mut events = Vec::new();
            for _ in 0..rng.random_range(0..6) {
                let si = rng.random_range(0..2);
                let n = document.sentence_len(si);
                let span = |rng: &mut ChaCha8Rng| {
                    let s = rng.random_range(0..n - 1);
                    TokenSpan::new(si, s, rng.random_range(s + 1..n.min(s + 3)))
                };
                let mut e = Event::new(["Symptom", "COVID"][rng.random_range(0..2)], span(rng));
                for _ in 0..rng.random_range(0..3) {
                    let s = span(rng);
                    e = e.with_labeled(["Assertion", "Severity"][rng.random_range(0..2)], s, ["present", "absent"][rng.random_range(0..2)]);
                }
                if rng.random_bool(0.5) {
                    let s = span(rng);
                    e = e.with_span_only("Anatomy", s);
                }
                events.push(e);
            }
            AnnotatedDocument { document, events }
        })
        .collect()
}

proptest! {
    #[test]
    fn self_comparison_is_perfect(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gold = random_corpus(&mut rng, 3);
        let report = score_documents(&gold, &gold, TriggerMatchMode::Exact).unwrap();
        for counts in report.counts.values() {
            prop_assert_eq!(counts.fp + counts.fn_, 0);
        }
    }

    #[test]
    fn exact_trigger_tp_is_set_intersection(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gold = random_corpus(&mut rng, 3);
        let pred = random_corpus(&mut rng, 3);
        let report = score_documents(&gold, &pred, TriggerMatchMode::Exact).unwrap();
        let triggers = |c: &[AnnotatedDocument]| -> BTreeSet<(String, String, TokenSpan)> {
            c.iter().flat_map(|d| d.events.iter().map(|e| (d.doc_id().to_string(), e.event_type().to_string(), e.trigger.span))).collect()
        };
        prop_assert_eq!(report.all_triggers().tp, triggers(&gold).intersection(&triggers(&pred)).count());
        let overlap = score_documents(&gold, &pred, TriggerMatchMode::AnyOverlap).unwrap();
        prop_assert!(overlap.all_triggers().tp >= report.all_triggers().tp);
    }

    #[test]
    fn micro_rows_sum_subtypes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gold = random_corpus(&mut rng, 3);
        let pred = random_corpus(&mut rng, 3);
        let report = score_documents(&gold, &pred, TriggerMatchMode::Exact).unwrap();
        for et in ["Symptom", "COVID"] {
            for arg in ["Assertion", "Severity"] {
                let summed = report
                    .counts
                    .iter()
                    .filter(|(slot, _)| slot.event_type == et && matches!(&slot.kind, SlotKind::Labeled { arg_type, .. } if arg_type == arg))
                    .fold(Counts::default(), |acc, (_, c)| acc + *c);
                prop_assert_eq!(report.labeled_micro(et, arg), summed);
                prop_assert_eq!(report.labeled_micro(et, arg).prf(), summed.prf());
            }
        }
    }

    #[test]
    fn agreement_is_symmetric(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_corpus(&mut rng, 2);
        let b = random_corpus(&mut rng, 2);
        let ab = agreement_report(&a, &b).unwrap();
        let ba = agreement_report(&b, &a).unwrap();
        for (slot, c) in &ab.counts {
            let r = ba.get(slot);
            prop_assert_eq!((c.tp, c.fp, c.fn_), (r.tp, r.fn_, r.fp));
            prop_assert!((c.prf().f1 - r.prf().f1).abs() < 1e-12);
        }
    }
}
