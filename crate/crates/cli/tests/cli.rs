use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn shorttopic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shorttopic"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is json")
}

const WORDS: [&[&str]; 3] = [
    &["football", "striker", "goal", "league", "match", "coach", "stadium", "season"],
    &["stocks", "market", "shares", "investors", "profit", "bank", "trading", "economy"],
    &["election", "senate", "voters", "campaign", "minister", "policy", "parliament", "candidate"],
];

fn write_dataset(path: &Path) {
    let mut tsv = String::new();
    for i in 0..60 {
        let t = i % 3;
        let w = WORDS[t];
        let text = format!("{} {} and {} over {}", w[i % 8], w[(i / 3 + 1) % 8], w[(i / 2 + 3) % 8], w[(i + 5) % 8]);
        tsv.push_str(&format!("topic{t}\t{text}\n"));
    }
    fs::write(path, tsv).unwrap();
}

fn prepared(dir: &Path) -> String {
    write_dataset(&dir.join("data.tsv"));
    let corpus = dir.join("corpus");
    let out = shorttopic(&[
        "prepare",
        "--input",
        dir.join("data.tsv").to_str().unwrap(),
        "--out",
        corpus.to_str().unwrap(),
    ]);
    let report = stdout_json(&out);
    assert_eq!(report["documents"], 60);
    corpus.to_str().unwrap().to_owned()
}

#[test]
fn end_to_end_subcommands() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let corpus = prepared(d);
    let ext = d.join("ext");
    let report = stdout_json(&shorttopic(&[
        "extend",
        "--corpus",
        &corpus,
        "--generator",
        "mock-lexicon",
        "--out",
        ext.to_str().unwrap(),
    ]));
    assert_eq!(report["records"], 60);
    let again = stdout_json(&shorttopic(&[
        "extend", "--corpus", &corpus, "--generator", "mock-lexicon", "--out", ext.to_str().unwrap(),
    ]));
    assert_eq!(again["generator_calls"], 0);

    let model = d.join("model");
    let trained = stdout_json(&shorttopic(&[
        "train",
        "--variant",
        "s2l",
        "--k",
        "20",
        "--epochs",
        "2",
        "--corpus",
        &corpus,
        "--extensions",
        ext.to_str().unwrap(),
        "--out",
        model.to_str().unwrap(),
        "--seed",
        "3",
    ]));
    assert_eq!(trained["num_topics"], 20);

    let topics = shorttopic(&["topics", "--model", model.to_str().unwrap(), "--k", "20", "--n", "10"]);
    assert!(topics.status.success());
    let text = String::from_utf8(topics.stdout).unwrap();
    assert_eq!(text.lines().count(), 20);
    assert!(text.lines().all(|l| l.split(' ').count() == 10));

    let scores = stdout_json(&shorttopic(&[
        "evaluate",
        "--topics",
        model.join("topics.txt").to_str().unwrap(),
        "--corpus",
        &corpus,
        "--extensions",
        ext.to_str().unwrap(),
        "--reference",
        "long",
        "--metrics",
        "cv,irbo",
    ]));
    assert!(scores["cv"].as_f64().unwrap().is_finite());
    assert_eq!(scores["per_topic"].as_array().unwrap().len(), 20);
    assert!((0.0..=1.0).contains(&scores["irbo"].as_f64().unwrap()));

    let acc = stdout_json(&shorttopic(&[
        "classify", "--model", model.to_str().unwrap(), "--corpus", &corpus, "--clf", "lr",
    ]));
    assert_eq!(acc["accuracy_per_fold"].as_array().unwrap().len(), 5);
    assert!(acc["accuracy_mean"].as_f64().unwrap() >= 0.0);
}

#[test]
fn evaluate_warns_about_out_of_vocabulary_words() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = prepared(tmp.path());
    let topics = tmp.path().join("topics.txt");
    fs::write(&topics, "football striker zzzunknown goal\nstocks market shares bank\n").unwrap();
    let out = shorttopic(&["evaluate", "--topics", topics.to_str().unwrap(), "--corpus", &corpus]);
    let report = stdout_json(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("zzzunknown"));
    assert_eq!(report["violations"][0]["word"], "zzzunknown");
    assert!(report["cv"].as_f64().unwrap().is_finite());
    assert_eq!(report["per_topic"].as_array().unwrap().len(), 2);
}

#[test]
fn missing_extensions_exit_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = prepared(tmp.path());
    let out = shorttopic(&[
        "--json",
        "train",
        "--variant",
        "l2s",
        "--corpus",
        &corpus,
        "--out",
        tmp.path().join("m").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let err: Value = serde_json::from_slice(&out.stderr).expect("stderr is json");
    assert_eq!(err["error"], "MissingExtensions");
    assert_eq!(err["exit_code"], 3);
}

#[test]
fn invalid_config_key_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, r#"{"dataset": "d.tsv", "output_dir": "out", "trainer": {"epochz": 3}}"#).unwrap();
    let out = shorttopic(&["--json", "run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["message"].as_str().unwrap().contains("epochz"));
}

#[test]
fn run_subcommand_is_resumable() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(&tmp.path().join("data.tsv"));
    let cfg = tmp.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"dataset": "data.tsv", "output_dir": "out", "seed": 5,
            "model": {"num_topics": 3}, "trainer": {"epochs": 2, "hidden_size": 16},
            "evaluation": {"folds": 3}}"#,
    )
    .unwrap();
    let first = stdout_json(&shorttopic(&["run", "--config", cfg.to_str().unwrap()]));
    assert!(first["stages"].as_array().unwrap().iter().all(|s| s["status"] == "computed"));
    let second = stdout_json(&shorttopic(&["run", "--config", cfg.to_str().unwrap()]));
    assert!(second["stages"].as_array().unwrap().iter().all(|s| s["status"] == "reused"));
    assert!(tmp.path().join("out/manifest.json").exists());
}

#[test]
fn missing_corpus_and_bad_flags() {
    let out = shorttopic(&["topics", "--model", "/nonexistent/model"]);
    assert_eq!(out.status.code(), Some(3));
    let out = shorttopic(&["train", "--corpus", "c", "--out", "o", "--variant", "x2y"]);
    assert_eq!(out.status.code(), Some(2));
}
