"""Exercise the extension module end to end; exits non-zero on failure."""

import os
import tempfile

import pyclinevent as ce


def main():
    sentences = ce.tokenize("Pt denies fever. Mild cough x2 days.")
    assert [t[0] for t in sentences[0]] == ["Pt", "denies", "fever", "."], sentences

    txt = "Patient reports fever .\n"
    ann = (
        "T1\tSymptom 16 21\tfever\n"
        "T2\tAssertion 8 15\treports\n"
        "E1\tSymptom:T1 Assertion:T2\n"
        "A1\tAssertionVal T2 present\n"
    )
    doc = ce.Document.from_standoff("d0", txt, ann)
    assert len(doc) == 1 and doc.events[0]["trigger_text"] == "fever"
    assert doc.validate() == []
    again = ce.Document.from_standoff("d0", *doc.to_standoff())
    assert again.events == doc.events

    report = ce.score([doc], [again], mode="any-overlap")
    assert report.trigger_f1 == 1.0 and report.labeled_f1 == 1.0
    assert ce.agreement([doc], [again]).trigger_f1 == 1.0
    assert ce.prf(3, 1, 0) == (0.75, 1.0, 6 / 7)

    assert ce.roc_auc([0.9, 0.1, 0.5, 0.5], [True, False, True, False]) == 0.875
    assert ce.fpr_at_tpr([0.9, 0.8, 0.2, 0.1], [True, True, False, False], 0.8) == 0.0
    assert ce.roc_curve([0.9, 0.1], [True, False])[0][1:] == (0.0, 0.0)
    t, p, df = ce.ttest([0.9, 0.8, 0.85, 0.95], [0.5, 0.55, 0.6, 0.45])
    assert t > 0 and p < 0.01 and df > 0

    assert ce.assign_note_label([(5.0, "negative"), (12.0, "positive")], 10.0) == "positive"
    assert ce.assign_note_label([(12.0, "negative")], 10.0) == "negative"
    assert ce.assign_note_label([(5.0, "positive")], 10.0) == "none"

    assert len(ce.enumerate_spans(4, 2)) == 7
    vectors = ce.hashed_embeddings("fever and Fever", 8, 1)
    assert vectors[0] == vectors[2] and all(-1.0 <= v <= 1.0 for v in vectors[1])

    corpus = [d.truncate_covid_triggers() for d in ce.synthetic_corpus(patients=3, seed=4)]
    table = ce.EmbeddingTable.hashed(corpus, 8, 0)
    model = ce.SpanModel.train(corpus, table, '{"epochs": 2, "hidden": 8, "span_hidden": 8, "role_hidden": 8}')
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.bin")
        model.save(path)
        model = ce.SpanModel.load(path)
    predicted = [model.extract(d, table) for d in corpus]
    assert all(p.validate() == [] for p in predicted)
    print(ce.score(corpus, predicted).to_tsv().splitlines()[0])

    try:
        ce.score([doc], [doc], mode="fuzzy")
    except ValueError:
        pass
    else:
        raise AssertionError("bad mode accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
