use std::fs;
use std::path::Path;

use serde_json::{json, Value};
use shorttopic::pipeline::{
    run_pipeline, run_pipeline_file, training_data, CorpusSettings, ModelSettings, PipelineError, RunConfig,
    StageStatus, CORPUS_DIR, EVALUATION_FILE, METRICS_DIR, MODEL_DIR, RUN_CONFIG_SCHEMA,
};
use shorttopic::pvtm::{Variant, TOPICS_FILE};
use shorttopic::synthetic::news_headlines;

fn write_dataset(path: &Path, n: usize, seed: u64) {
    let mut tsv = String::new();
    for r in news_headlines(n, seed) {
        tsv.push_str(&format!("{}\t{}\n", r.label.unwrap(), r.text));
    }
    fs::write(path, tsv).unwrap();
}

fn small_config(dir: &Path, out: &str) -> Value {
    json!({
        "dataset": dir.join("data.tsv"),
        "output_dir": dir.join(out),
        "seed": 11,
        "model": { "variant": "s2l", "num_topics": 6 },
        "trainer": { "epochs": 4, "hidden_size": 32, "batch_size": 32 },
        "encoder": { "num_virtual_tokens": 4 },
        "extension": { "cache_dir": dir.join("cache") },
        "evaluation": { "folds": 3 }
    })
}

fn parse(v: &Value) -> RunConfig {
    RunConfig::from_json(&v.to_string()).unwrap()
}

fn object_keys(v: &Value) -> Vec<String> {
    let mut keys: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    keys
}

#[test]
fn schema_agrees_with_config_type() {
    let schema: Value = serde_json::from_str(RUN_CONFIG_SCHEMA).unwrap();
    let config = parse(&json!({ "dataset": "d.tsv", "output_dir": "out" }));
    let value = serde_json::to_value(&config).unwrap();
    assert_eq!(object_keys(&schema["properties"]), object_keys(&value));
    for (section, fields) in value.as_object().unwrap() {
        let Some(fields) = fields.as_object() else { continue };
        let props = &schema["properties"][section]["properties"];
        assert_eq!(object_keys(props), object_keys(&Value::Object(fields.clone())), "section {section}");
        for (key, default) in fields {
            assert_eq!(&props[key]["default"], default, "{section}.{key}");
        }
        assert_eq!(schema["properties"][section]["additionalProperties"], false);
    }
}

#[test]
fn unknown_keys_are_named() {
    for bad in [
        json!({ "dataset": "d", "output_dir": "o", "colour": 1 }),
        json!({ "dataset": "d", "output_dir": "o", "trainer": { "colour": 1 } }),
    ] {
        let err = RunConfig::from_json(&bad.to_string()).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }
    let invalid = json!({ "dataset": "d", "output_dir": "o", "model": { "num_topics": 0 } });
    assert_eq!(RunConfig::from_json(&invalid.to_string()).unwrap_err().exit_code(), 2);
}

#[test]
fn config_file_paths_resolve_against_its_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("run.json");
    fs::write(&path, r#"{"dataset": "data.tsv", "output_dir": "out"}"#).unwrap();
    let config = RunConfig::load(&path).unwrap();
    assert_eq!(config.dataset, tmp.path().join("data.tsv"));
    // The dataset does not exist: a missing prerequisite.
    assert_eq!(run_pipeline_file(&path).unwrap_err().exit_code(), 3);
}

#[test]
fn reruns_reuse_stages_and_hashes_are_scoped() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(&tmp.path().join("data.tsv"), 120, 4);
    let mut value = small_config(tmp.path(), "run");

    let first = run_pipeline(&parse(&value)).unwrap();
    assert_eq!(first.computed(), ["prepare", "extend", "train", "evaluate", "classify"]);
    let out = tmp.path().join("run");
    assert!(out.join("manifest.json").exists());
    let topics = fs::read_to_string(out.join(MODEL_DIR).join(TOPICS_FILE)).unwrap();
    assert_eq!(topics.lines().count(), 6);
    assert!(topics.lines().all(|l| l.split(' ').count() == 10));

    let second = run_pipeline(&parse(&value)).unwrap();
    assert!(second.computed().is_empty());
    assert!(second.stages.iter().all(|s| s.status == StageStatus::Reused));

    value["model"]["num_topics"] = json!(5);
    let third = run_pipeline(&parse(&value)).unwrap();
    assert_eq!(third.stage("prepare").unwrap().status, StageStatus::Reused);
    assert_eq!(third.stage("extend").unwrap().status, StageStatus::Reused);
    assert_eq!(third.computed(), ["train", "evaluate", "classify"]);
    assert_ne!(first.config_hash, third.config_hash);

    let eval: Value =
        serde_json::from_slice(&fs::read(out.join(METRICS_DIR).join("evaluation").join(EVALUATION_FILE)).unwrap())
            .unwrap();
    assert_eq!(eval["per_topic"].as_array().unwrap().len(), 5);
    assert!(eval["irbo"].as_f64().unwrap() <= 1.0);
}

#[test]
fn equal_seeds_give_identical_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(&tmp.path().join("data.tsv"), 90, 8);
    run_pipeline(&parse(&small_config(tmp.path(), "a"))).unwrap();
    run_pipeline(&parse(&small_config(tmp.path(), "b"))).unwrap();
    for rel in [
        format!("{MODEL_DIR}/{TOPICS_FILE}"),
        format!("{METRICS_DIR}/evaluation/{EVALUATION_FILE}"),
        format!("{METRICS_DIR}/classification/classification.json"),
    ] {
        let a = fs::read(tmp.path().join("a").join(&rel)).unwrap();
        let b = fs::read(tmp.path().join("b").join(&rel)).unwrap();
        assert_eq!(a, b, "{rel} differs");
    }
}

#[test]
fn baselines_run_through_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(&tmp.path().join("data.tsv"), 90, 2);
    for kind in ["lda", "nmf"] {
        let mut value = small_config(tmp.path(), kind);
        value["model"]["kind"] = json!(kind);
        let m = run_pipeline(&parse(&value)).unwrap();
        assert_eq!(m.stage("extend").unwrap().status, StageStatus::Skipped);
        assert_eq!(m.stage("classify").unwrap().status, StageStatus::Computed);
    }
}

#[test]
fn long_input_without_extensions_is_a_missing_prerequisite() {
    let tmp = tempfile::tempdir().unwrap();
    write_dataset(&tmp.path().join("data.tsv"), 30, 1);
    let mut value = small_config(tmp.path(), "run");
    value["model"]["variant"] = json!("s2s");
    run_pipeline(&parse(&value)).unwrap();
    let (corpus, _) = shorttopic::pipeline::load_corpus(&tmp.path().join("run").join(CORPUS_DIR)).unwrap();
    let model = ModelSettings {
        variant: Variant::L2S,
        ..Default::default()
    };
    let err: PipelineError = training_data(&corpus, None, &model, &CorpusSettings::default()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert_eq!(err.kind(), "MissingExtensions");
}
