use std::fs;
use std::path::Path;

use clinevent::synthetic::{make_synthetic_corpus, SyntheticSpec};
use clinevent_cli::dispatch;

fn run(args: &[&str]) -> i32 {
    let argv: Vec<&str> = std::iter::once("clinevent").chain(args.iter().copied()).collect();
    dispatch(&argv)
}

fn synthetic_dir(dir: &Path, patients: usize) {
    make_synthetic_corpus(&SyntheticSpec { patients, ..SyntheticSpec::default() }, 2).write_to_dir(dir).unwrap();
}

#[test]
fn self_score_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    synthetic_dir(dir.path(), 4);
    let corpus = dir.path().join("corpus");
    let out = dir.path().join("scores.tsv");
    let c = corpus.to_str().unwrap();
    assert_eq!(run(&["score", "--gold", c, "--pred", c, "--mode", "exact", "--out", out.to_str().unwrap()]), 0);
    let report = fs::read_to_string(&out).unwrap();
    let mut rows = report.lines();
    let header: Vec<&str> = rows.next().unwrap().split('\t').collect();
    let f1 = header.iter().position(|h| *h == "F1").unwrap();
    let mut n = 0;
    for row in rows {
        let cols: Vec<&str> = row.split('\t').collect();
        if cols[1..4].iter().all(|c| *c == "0") {
            continue;
        }
        assert_eq!(cols[f1].parse::<f64>().unwrap(), 1.0, "{row}");
        n += 1;
    }
    assert!(n > 5);
    assert_eq!(run(&["agree", "--annotator-a", c, "--annotator-b", c, "--mode", "any-overlap", "--format", "pretty"]), 0);
}

#[test]
fn input_errors_exit_one() {
    assert_eq!(run(&["score", "--gold", "somewhere"]), 1);
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&[]), 1);
    assert_eq!(run(&["score", "--gold", "/nonexistent", "--pred", "/nonexistent"]), 1);
    assert_eq!(run(&["validate", "--corpus", "/nonexistent"]), 1);
    assert_eq!(run(&["synth", "--threads", "0", "--out", "/tmp/unused"]), 1);
    assert_eq!(run(&["validate", "--corpus", ".", "--mode", "fuzzy"]), 1);
    assert_eq!(run(&["--help"]), 0);
}

#[test]
fn validate_flags_schema_violations() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c");
    fs::create_dir(&corpus).unwrap();
    fs::write(corpus.join("d.txt"), "Denies fever today.\n").unwrap();
    // a Symptom with no Assertion
    fs::write(corpus.join("d.ann"), "T1\tSymptom 7 12\tfever\nE1\tSymptom:T1\n").unwrap();
    let listing = dir.path().join("violations.tsv");
    let code = run(&["validate", "--corpus", corpus.to_str().unwrap(), "--out", listing.to_str().unwrap()]);
    assert_eq!(code, 1);
    assert_eq!(fs::read_to_string(listing).unwrap().lines().count(), 2);
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    synthetic_dir(dir.path(), 3);
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    fs::write(p("model.json"), r#"{"epochs": 2, "hidden": 8, "span_hidden": 8, "role_hidden": 8}"#).unwrap();
    let (corpus, emb, config) = (p("corpus"), p("embeddings.txt"), p("model.json"));
    for (out, threads) in [("a.bin", "1"), ("b.bin", "1"), ("c.bin", "3")] {
        let out = p(out);
        let args = ["train", "--corpus", &corpus, "--embeddings", &emb, "--config", &config, "--seed", "7", "--threads", threads, "--out", &out];
        assert_eq!(run(&args), 0);
    }
    let a = fs::read(p("a.bin")).unwrap();
    assert_eq!(a, fs::read(p("b.bin")).unwrap());
    assert_eq!(a, fs::read(p("c.bin")).unwrap());

    let other = p("d.bin");
    assert_eq!(run(&["train", "--corpus", &corpus, "--embeddings", &emb, "--config", &config, "--seed", "8", "--out", &other]), 0);
    assert_ne!(a, fs::read(&other).unwrap());
}

#[test]
fn extract_and_predict_run_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    synthetic_dir(dir.path(), 30);
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    fs::write(p("model.json"), r#"{"epochs": 1, "hidden": 8, "span_hidden": 8, "role_hidden": 8}"#).unwrap();
    let aggregation = fs::read_to_string(p("aggregation.json")).unwrap();
    fs::write(p("predict.json"), format!(r#"{{"aggregation": {aggregation}, "holdout": {{"reps": 5}}, "importance_reps": 1}}"#)).unwrap();
    let (corpus, emb) = (p("corpus"), p("embeddings.txt"));
    assert_eq!(run(&["train", "--corpus", &corpus, "--embeddings", &emb, "--config", &p("model.json"), "--out", &p("m.bin")]), 0);
    assert_eq!(run(&["extract", "--model", &p("m.bin"), "--corpus", &corpus, "--embeddings", &emb, "--out", &p("pred")]), 0);
    assert!(Path::new(&p("pred")).is_dir());

    // gold events stand in for extracted ones
    let args = [
        "predict", "--timelines", &p("timelines.jsonl"), "--extracted", &corpus, "--note-type", "telephone",
        "--config", &p("predict.json"), "--out", &p("report.tsv"), "--roc", &p("roc.tsv"),
    ];
    assert_eq!(run(&args), 0);
    let report = fs::read_to_string(p("report.tsv")).unwrap();
    assert!(report.starts_with("metric\tmean\tsd\tn\n"));
    assert!(report.contains("all.auc\t"));
    assert!(fs::read_to_string(p("roc.tsv")).unwrap().lines().count() > 5);
    assert_eq!(run(&["predict", "--timelines", &p("timelines.jsonl"), "--extracted", &corpus, "--note-type", "radiology"]), 1);
}
