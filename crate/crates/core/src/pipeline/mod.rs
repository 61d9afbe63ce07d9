//! Config-driven runs: prepare, extend, train, evaluate and classify. Each stage stamps its
//! output directory with a fingerprint of its inputs, and a rerun reuses every stage whose
//! fingerprint is unchanged.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    CorpusSettings, EncoderSettings, EvaluationSettings, ExtensionSettings, GeneratorKind, ModelKind,
    ModelSettings, ReferenceCorpus, RunConfig, TrainerSettings, RUN_CONFIG_SCHEMA,
};

use crate::baselines::{bow_matrix, lda_gibbs, nmf, save_baseline, BaselineError, FittedTopics, LdaConfig, NmfConfig};
use crate::corpus::{preprocess, read_corpus_dir, read_tsv, write_corpus_dir, Corpus, CorpusError, Vocabulary};
use crate::encoder::{BaseEncoder, EncoderError};
use crate::evaluation::{c_v, classify, irbo, ClassificationReport, ClassifierKind, ClassifyConfig, EvalError, TopicSet, TopicViolation};
use crate::extension::{
    extend_corpus, read_extensions, write_extensions, CommandGenerator, ExtendOptions, ExtensionCache,
    ExtensionError, ExtensionRecord, ExtensionReport, Generator, Lexicon, MockEchoGenerator, MockLexiconGenerator,
    RemoteGenerator, RetryPolicy,
};
use crate::pvtm::{
    prepare_training_data, read_meta, read_topics, read_vocabulary, save_checkpoint, train, DataOptions, InputEncoding,
    PvtmError, TrainingData, Variant, TOPICS_FILE,
};
use crate::tensorfile::TensorFile;
use crate::util::{json_hash, sha256_hex, write_atomic};

pub const CORPUS_DIR: &str = "corpus";
pub const EXTENSIONS_DIR: &str = "extensions";
pub const MODEL_DIR: &str = "model";
pub const METRICS_DIR: &str = "metrics";
pub const RUN_MANIFEST: &str = "manifest.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const CLASSIFICATION_FILE: &str = "classification.json";
pub const TRAINING_LOG_FILE: &str = "training_log.json";
pub const DOC_TOPIC_FILE: &str = "doc_topic.bin";
pub const CORPUS_SETTINGS_FILE: &str = "settings.json";
const STAGE_STAMP: &str = ".stage.json";
const MANIFEST_FORMAT: &str = "shorttopic-run";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    MissingArtifact(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Extension(#[from] ExtensionError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Pvtm(#[from] PvtmError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn not_found(e: &std::io::Error) -> bool {
    e.kind() == std::io::ErrorKind::NotFound
}

impl PipelineError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 for configuration errors, 3 for a missing prerequisite artifact,
    /// 4 for runtime and numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_)
            | PipelineError::Pvtm(PvtmError::InvalidConfig(_))
            | PipelineError::Baseline(BaselineError::InvalidConfig(_))
            | PipelineError::Encoder(EncoderError::InvalidConfig(_) | EncoderError::UnknownBaseModel(_))
            | PipelineError::Extension(ExtensionError::UnknownTemplate(_) | ExtensionError::InvalidParams(_)) => 2,
            PipelineError::MissingArtifact(_) | PipelineError::Pvtm(PvtmError::MissingExtensions { .. }) => 3,
            PipelineError::Io { source, .. }
            | PipelineError::Corpus(CorpusError::Io { source, .. })
            | PipelineError::Pvtm(PvtmError::Io { source, .. })
            | PipelineError::Encoder(EncoderError::Io { source, .. })
                if not_found(source) =>
            {
                3
            }
            _ => 4,
        }
    }

    /// Short machine-readable error name.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) => "ConfigError",
            PipelineError::MissingArtifact(_) => "MissingArtifact",
            PipelineError::Corpus(_) => "CorpusError",
            PipelineError::Extension(ExtensionError::GeneratorUnavailable { .. }) => "GeneratorUnavailable",
            PipelineError::Extension(ExtensionError::TooManyFailures { .. }) => "TooManyFailures",
            PipelineError::Extension(_) => "ExtensionError",
            PipelineError::Encoder(_) => "EncoderError",
            PipelineError::Pvtm(PvtmError::MissingExtensions { .. }) => "MissingExtensions",
            PipelineError::Pvtm(PvtmError::NaNLoss { .. }) => "NaNLoss",
            PipelineError::Pvtm(PvtmError::DimensionMismatch { .. }) => "DimensionMismatch",
            PipelineError::Pvtm(_) => "ModelError",
            PipelineError::Baseline(_) => "BaselineError",
            PipelineError::Eval(EvalError::DegenerateLabels) => "DegenerateLabels",
            PipelineError::Eval(_) => "EvaluationError",
            PipelineError::Io { .. } => "IoError",
        }
    }
}

/// Seed of one stage, derived from the root seed and the stage name.
pub fn stage_seed(root: u64, stage: &str) -> u64 {
    let digest = sha256_hex(format!("{root}:{stage}").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

/// Reads the dataset and builds the corpus.
pub fn prepare_corpus(dataset: &Path, settings: &CorpusSettings) -> Result<Corpus, PipelineError> {
    let records = read_tsv(dataset)?;
    Ok(Corpus::build(records, &settings.options()?)?)
}

/// Writes the corpus directory together with the settings it was built with.
pub fn save_corpus(dir: &Path, corpus: &Corpus, settings: &CorpusSettings) -> Result<(), PipelineError> {
    write_corpus_dir(dir, corpus)?;
    write_json(&dir.join(CORPUS_SETTINGS_FILE), settings)
}

pub fn load_corpus(dir: &Path) -> Result<(Corpus, CorpusSettings), PipelineError> {
    if !dir.join(crate::corpus::MANIFEST_FILE).exists() {
        return Err(PipelineError::MissingArtifact(format!(
            "{} is not a prepared corpus directory",
            dir.display()
        )));
    }
    let corpus = read_corpus_dir(dir)?;
    let settings_path = dir.join(CORPUS_SETTINGS_FILE);
    let settings = match fs::read(&settings_path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| PipelineError::Config(format!("{}: {e}", settings_path.display())))?,
        Err(e) if not_found(&e) => CorpusSettings::default(),
        Err(e) => return Err(PipelineError::io(&settings_path, e)),
    };
    Ok((corpus, settings))
}

pub fn load_extensions(dir: &Path) -> Result<Vec<ExtensionRecord>, PipelineError> {
    if !dir.join(crate::extension::EXTENSIONS_FILE).exists() {
        return Err(PipelineError::MissingArtifact(format!("no extensions in {}", dir.display())));
    }
    Ok(read_extensions(dir)?)
}

pub fn build_generator(settings: &ExtensionSettings) -> Result<Box<dyn Generator>, PipelineError> {
    Ok(match settings.generator {
        GeneratorKind::MockEcho => Box::new(MockEchoGenerator::new(settings.echo_repeat)),
        GeneratorKind::MockLexicon => match &settings.lexicon {
            Some(path) => Box::new(MockLexiconGenerator::new(
                Lexicon::load(path).map_err(|e| PipelineError::io(path, e))?,
            )),
            None => Box::new(MockLexiconGenerator::default()),
        },
        GeneratorKind::Remote => {
            let url = settings
                .url
                .clone()
                .ok_or_else(|| PipelineError::Config("the remote generator needs a url".into()))?;
            Box::new(RemoteGenerator::from_env(
                url,
                &settings.token_env,
                Duration::from_secs(settings.timeout_secs),
            ))
        }
        GeneratorKind::Local => {
            let (program, args) = settings
                .command
                .split_first()
                .ok_or_else(|| PipelineError::Config("the local generator needs a command".into()))?;
            Box::new(CommandGenerator::new(program.clone(), args.to_vec()))
        }
    })
}

/// Cache location for a run. A custom lexicon gets its own subdirectory, since its records
/// share prompt hashes with those of the bundled lexicon.
pub fn extension_cache(settings: &ExtensionSettings, output_dir: &Path) -> Result<ExtensionCache, PipelineError> {
    let mut dir = settings
        .cache_dir
        .clone()
        .unwrap_or_else(|| output_dir.join("cache").join("extensions"));
    if let (GeneratorKind::MockLexicon, Some(path)) = (settings.generator, &settings.lexicon) {
        let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
        dir = dir.join(format!("lexicon-{}", &sha256_hex(&bytes)[..12]));
    }
    Ok(ExtensionCache::new(dir))
}

/// Extends every corpus document. Failures below the configured fraction are reported and
/// logged; above it the call fails.
pub fn extend_documents(
    corpus: &Corpus,
    generator: &dyn Generator,
    settings: &ExtensionSettings,
    cache: &ExtensionCache,
) -> Result<ExtensionReport, PipelineError> {
    let docs: Vec<(String, String)> = corpus
        .documents
        .iter()
        .map(|d| (d.id.clone(), d.raw_text.clone()))
        .collect();
    let options = ExtendOptions {
        max_parallel: settings.max_parallel.max(1),
        max_failure_fraction: settings.max_failure_fraction,
        retry: RetryPolicy {
            max_attempts: settings.max_attempts.max(1),
            ..RetryPolicy::default()
        },
    };
    let report = extend_corpus(&docs, generator, &settings.params(), cache, &options)?;
    for f in &report.failures {
        log::warn!("extension failed for document {}: {}", f.doc_id, f.error);
    }
    log::info!(
        "extended {} documents ({} cached, {} generated, {} failed)",
        report.records.len(),
        report.cache_hits,
        report.generator_calls,
        report.failures.len()
    );
    Ok(report)
}

fn data_options(model: &ModelSettings, corpus: &CorpusSettings) -> Result<DataOptions, PipelineError> {
    let mut options = DataOptions::new(model.target_vocabulary);
    let corpus_options = corpus.options()?;
    options.preprocess = corpus_options.preprocess;
    options.min_df = corpus_options.min_df;
    options.max_df_fraction = corpus_options.max_df_fraction;
    Ok(options)
}

/// Inputs and targets for the configured model. Baselines always fit the short texts.
pub fn training_data(
    corpus: &Corpus,
    extensions: Option<&[ExtensionRecord]>,
    model: &ModelSettings,
    corpus_settings: &CorpusSettings,
) -> Result<TrainingData, PipelineError> {
    let variant = match model.kind {
        ModelKind::Pvtm => model.variant,
        ModelKind::Lda | ModelKind::Nmf => Variant::S2S,
    };
    Ok(prepare_training_data(
        variant,
        corpus,
        extensions,
        &data_options(model, corpus_settings)?,
    )?)
}

/// Result of fitting any model kind.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub topics: Vec<Vec<String>>,
    /// Rows follow the training corpus order.
    pub doc_topic: Array2<f64>,
    pub vocabulary: Vocabulary,
    pub losses: Option<Vec<f64>>,
}

/// Fits the configured model on `data` and writes its checkpoint into `out_dir`.
pub fn train_model(
    data: &TrainingData,
    model: &ModelSettings,
    trainer: &TrainerSettings,
    encoder: &EncoderSettings,
    seed: u64,
    out_dir: &Path,
    top_n: usize,
) -> Result<TrainedModel, PipelineError> {
    let k = model.num_topics;
    let top_n = top_n.min(data.vocabulary.len());
    let trained = match model.kind {
        ModelKind::Pvtm => {
            let config = trainer.train_config(model, encoder, seed);
            let base = match config.input_encoding {
                InputEncoding::Transformer => Some(Arc::new(BaseEncoder::load_with_max_len(
                    &encoder.base_model,
                    encoder.max_seq_len,
                )?)),
                InputEncoding::Bow => None,
            };
            let (fitted, log) = train(data, base, &config)?;
            save_checkpoint(&fitted, out_dir)?;
            let rows = match config.input_encoding {
                InputEncoding::Transformer => fitted.doc_topics(&data.inputs)?,
                InputEncoding::Bow => fitted.doc_topics_from_bows(&data.input_bows)?,
            };
            let mut doc_topic = Array2::zeros((rows.len(), k));
            for (mut dst, src) in doc_topic.rows_mut().into_iter().zip(&rows) {
                dst.assign(src);
            }
            let mut tf = TensorFile::new(serde_json::json!({ "kind": "pvtm" }));
            tf.push("doc_topic", &doc_topic);
            tf.save(&out_dir.join(DOC_TOPIC_FILE)).map_err(PvtmError::from)?;
            write_json(&out_dir.join(TRAINING_LOG_FILE), &log)?;
            TrainedModel {
                kind: model.kind,
                topics: fitted.top_words(top_n),
                doc_topic,
                vocabulary: data.vocabulary.clone(),
                losses: Some(log.epochs.iter().map(|e| e.loss).collect()),
            }
        }
        ModelKind::Lda => {
            let config = LdaConfig {
                num_topics: k,
                alpha: trainer.lda_alpha,
                eta: trainer.lda_eta,
                iterations: trainer.lda_iterations,
                seed,
            };
            let result = lda_gibbs(&data.targets, &config)?;
            let fitted = FittedTopics {
                kind: "lda".into(),
                doc_topic: result.doc_topic,
                topic_word: result.topic_word,
            };
            save_baseline(out_dir, &fitted, &data.vocabulary, &config, seed)?;
            TrainedModel {
                kind: model.kind,
                topics: fitted.top_words(&data.vocabulary, top_n),
                doc_topic: fitted.doc_topic,
                vocabulary: data.vocabulary.clone(),
                losses: None,
            }
        }
        ModelKind::Nmf => {
            let config = NmfConfig {
                num_topics: k,
                iterations: trainer.nmf_iterations,
                seed,
            };
            let (factors, objective) = nmf(&bow_matrix(&data.targets), &config)?;
            let fitted = FittedTopics {
                kind: "nmf".into(),
                doc_topic: factors.doc_topic(),
                topic_word: factors.topic_word(),
            };
            save_baseline(out_dir, &fitted, &data.vocabulary, &config, seed)?;
            TrainedModel {
                kind: model.kind,
                topics: fitted.top_words(&data.vocabulary, top_n),
                doc_topic: fitted.doc_topic,
                vocabulary: data.vocabulary.clone(),
                losses: Some(objective),
            }
        }
    };
    // The checkpoint's own dump uses the default depth; rewrite it at the requested one.
    crate::pvtm::write_topics(&out_dir.join(TOPICS_FILE), &trained.topics)?;
    Ok(trained)
}

/// Document-topic matrix stored with any checkpoint kind.
pub fn load_doc_topic(model_dir: &Path) -> Result<Array2<f64>, PipelineError> {
    let meta = read_meta(model_dir)?;
    let file = if meta.kind == "pvtm" {
        DOC_TOPIC_FILE
    } else {
        crate::baselines::TENSORS_FILE
    };
    let path = model_dir.join(file);
    if !path.exists() {
        return Err(PipelineError::MissingArtifact(format!("{} not found", path.display())));
    }
    let tf = TensorFile::load(&path).map_err(PvtmError::from)?;
    Ok(tf.get2("doc_topic").map_err(PvtmError::from)?)
}

/// Top-`n` words of the first `k` topics of a checkpoint.
pub fn checkpoint_topics(model_dir: &Path, k: Option<usize>, n: usize) -> Result<Vec<Vec<String>>, PipelineError> {
    let meta = read_meta(model_dir)?;
    let vocabulary = read_vocabulary(model_dir)?;
    let topic_word = if meta.kind == "pvtm" {
        crate::pvtm::load_checkpoint(model_dir, None)?.topic_word()
    } else {
        let tf = TensorFile::load(&model_dir.join(crate::baselines::TENSORS_FILE)).map_err(PvtmError::from)?;
        tf.get2("topic_word").map_err(PvtmError::from)?
    };
    let k = k.unwrap_or(meta.k);
    if k > meta.k {
        return Err(PipelineError::Config(format!("asked for {k} topics but the model has {}", meta.k)));
    }
    if n > vocabulary.len() {
        return Err(PipelineError::Config(format!(
            "asked for {n} words per topic but the vocabulary has {}",
            vocabulary.len()
        )));
    }
    Ok(crate::util::top_word_ids(&topic_word, n)
        .into_iter()
        .take(k)
        .map(|ids| ids.into_iter().filter_map(|i| vocabulary.token(i).map(str::to_owned)).collect())
        .collect())
}

/// Topics of a `topics.txt` file; a missing file is a missing prerequisite.
pub fn load_topics(path: &Path) -> Result<TopicSet, PipelineError> {
    if !path.exists() {
        return Err(PipelineError::MissingArtifact(format!("{} not found", path.display())));
    }
    Ok(TopicSet::new(read_topics(path)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cv,
    Irbo,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cv" | "c_v" => Ok(Metric::Cv),
            "irbo" => Ok(Metric::Irbo),
            _ => Err(format!("unknown metric {s:?} (expected cv or irbo)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub cv: Option<f64>,
    pub irbo: Option<f64>,
    /// C_V of each topic.
    pub per_topic: Vec<f64>,
    pub zero_support: Vec<String>,
    pub violations: Vec<TopicViolation>,
}

/// Scores topics against a tokenized reference corpus. Duplicates and words outside
/// `vocabulary` are reported and left out of the scores.
pub fn evaluate_topics<D: AsRef<[String]>>(
    topics: &TopicSet,
    vocabulary: &Vocabulary,
    reference: &[D],
    metrics: &[Metric],
    settings: &EvaluationSettings,
) -> Result<EvaluationReport, PipelineError> {
    let (clean, violations) = topics.restrict_to(vocabulary);
    let mut report = EvaluationReport {
        cv: None,
        irbo: None,
        per_topic: Vec::new(),
        zero_support: Vec::new(),
        violations,
    };
    if metrics.contains(&Metric::Cv) {
        let cv = c_v(&clean, reference, settings.window)?;
        report.cv = Some(cv.cv);
        report.per_topic = cv.per_topic;
        report.zero_support = cv.zero_support;
    }
    if metrics.contains(&Metric::Irbo) {
        let depth = clean.topics.iter().map(Vec::len).min().unwrap_or(0);
        if clean.topics.iter().any(|t| t.len() != depth) {
            log::warn!("topics have unequal lengths after cleanup; IRBO uses the top {depth} words");
        }
        if depth == 0 {
            return Err(EvalError::InvalidInput("a topic has no in-vocabulary words".into()).into());
        }
        let truncated = TopicSet::new(clean.topics.iter().map(|t| t[..depth].to_vec()).collect());
        report.irbo = Some(irbo(&truncated, settings.rbo_persistence)?);
    }
    Ok(report)
}

/// Tokenized reference texts for coherence.
pub fn reference_tokens(
    which: ReferenceCorpus,
    model: &ModelSettings,
    corpus: &Corpus,
    extensions: Option<&[ExtensionRecord]>,
    corpus_settings: &CorpusSettings,
) -> Result<Vec<Vec<String>>, PipelineError> {
    let long = match which {
        ReferenceCorpus::Short => false,
        ReferenceCorpus::Long => true,
        ReferenceCorpus::Target => model.kind == ModelKind::Pvtm && model.variant.long_target(),
    };
    if !long {
        return Ok(corpus.documents.iter().map(|d| d.tokens.clone()).collect());
    }
    let ext = extensions
        .ok_or_else(|| PipelineError::MissingArtifact("extended texts are needed for the reference corpus".into()))?;
    let options = corpus_settings.options()?.preprocess;
    Ok(ext.iter().map(|r| preprocess(&r.long_text, &options)).collect())
}

/// Cross-validated accuracy for each classifier. Every document needs a label.
pub fn classify_topics(
    doc_topic: &Array2<f64>,
    labels: &[Option<String>],
    classifiers: &[ClassifierKind],
    folds: usize,
    seed: u64,
) -> Result<BTreeMap<String, ClassificationReport>, PipelineError> {
    let labels: Vec<&str> = labels
        .iter()
        .map(|l| l.as_deref())
        .collect::<Option<_>>()
        .ok_or_else(|| PipelineError::MissingArtifact("classification needs a label for every document".into()))?;
    if doc_topic.nrows() != labels.len() {
        return Err(PvtmError::DimensionMismatch {
            expected: labels.len(),
            found: doc_topic.nrows(),
        }
        .into());
    }
    let mut out = BTreeMap::new();
    for &kind in classifiers {
        let config = ClassifyConfig {
            kind,
            folds,
            seed,
            ..Default::default()
        };
        let report = classify(doc_topic, &labels, &config)?;
        let name = serde_json::to_value(kind).expect("kind serializes");
        out.insert(name.as_str().expect("string").to_owned(), report);
    }
    Ok(out)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("value serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(|e| PipelineError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, PipelineError> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::MissingArtifact(format!("{}: {e}", path.display())))
}

fn file_hash(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn optional_file_hash(path: Option<&PathBuf>) -> Result<Option<String>, PipelineError> {
    path.map(|p| file_hash(p)).transpose()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Computed,
    Reused,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub fingerprint: Option<String>,
    pub seed: Option<u64>,
    pub outputs: Vec<String>,
}

/// `manifest.json` at the root of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn computed(&self) -> Vec<&str> {
        self.stages
            .iter()
            .filter(|s| s.status == StageStatus::Computed)
            .map(|s| s.name.as_str())
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct StageStamp {
    stage: String,
    fingerprint: String,
}

/// A stage directory is current when its stamp carries `fingerprint` and all outputs exist.
fn stage_current(dir: &Path, fingerprint: &str, outputs: &[&str]) -> bool {
    let Ok(stamp) = read_json::<StageStamp>(&dir.join(STAGE_STAMP)) else {
        return false;
    };
    stamp.fingerprint == fingerprint && outputs.iter().all(|o| dir.join(o).exists())
}

fn reset_dir(dir: &Path) -> Result<(), PipelineError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))
}

fn stamp(dir: &Path, stage: &str, fingerprint: &str) -> Result<(), PipelineError> {
    write_json(
        &dir.join(STAGE_STAMP),
        &StageStamp {
            stage: stage.into(),
            fingerprint: fingerprint.into(),
        },
    )
}

/// Runs the stage in `dir` unless its stamp already matches `fingerprint`.
fn run_stage(
    name: &str,
    dir: &Path,
    fingerprint: &str,
    seed: Option<u64>,
    outputs: &[&str],
    work: impl FnOnce() -> Result<(), PipelineError>,
) -> Result<StageRecord, PipelineError> {
    let status = if stage_current(dir, fingerprint, outputs) {
        log::info!("stage {name}: inputs unchanged, reusing {}", dir.display());
        StageStatus::Reused
    } else {
        log::info!("stage {name}: running");
        reset_dir(dir)?;
        work()?;
        stamp(dir, name, fingerprint)?;
        StageStatus::Computed
    };
    Ok(StageRecord {
        name: name.into(),
        status,
        fingerprint: Some(fingerprint.into()),
        seed,
        outputs: outputs.iter().map(|o| dir.join(o).display().to_string()).collect(),
    })
}

fn skipped(name: &str) -> StageRecord {
    StageRecord {
        name: name.into(),
        status: StageStatus::Skipped,
        fingerprint: None,
        seed: None,
        outputs: Vec::new(),
    }
}

/// Loads, validates and runs a config file.
pub fn run_pipeline_file(config_path: &Path) -> Result<RunManifest, PipelineError> {
    let config = RunConfig::load(config_path)?;
    run_pipeline(&config)
}

/// Executes prepare, extend, train, evaluate and classify in order and writes
/// `manifest.json`. Stops at the first failing stage; earlier outputs stay on disk.
pub fn run_pipeline(config: &RunConfig) -> Result<RunManifest, PipelineError> {
    config.validate()?;
    let out = &config.output_dir;
    fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;
    let version = env!("CARGO_PKG_VERSION");
    let mut stages = Vec::new();

    // prepare
    let corpus_dir = out.join(CORPUS_DIR);
    let prepare_fp = json_hash(&serde_json::json!({
        "stage": "prepare",
        "version": version,
        "dataset": file_hash(&config.dataset)?,
        "settings": config.corpus,
        "stopwords": optional_file_hash(config.corpus.stopwords.as_ref())?,
    }));
    stages.push(run_stage("prepare", &corpus_dir, &prepare_fp, None, &[crate::corpus::MANIFEST_FILE], || {
        let corpus = prepare_corpus(&config.dataset, &config.corpus)?;
        save_corpus(&corpus_dir, &corpus, &config.corpus)
    })?);
    let (corpus, _) = load_corpus(&corpus_dir)?;

    // extend
    let ext_dir = out.join(EXTENSIONS_DIR);
    let wants_long = config.model.needs_extensions() || config.evaluation.reference == ReferenceCorpus::Long;
    let ext_fp = if wants_long {
        let e = &config.extension;
        let fp = json_hash(&serde_json::json!({
            "stage": "extend",
            "corpus": prepare_fp,
            "generator": e.generator,
            "params": e.params(),
            "echo_repeat": e.echo_repeat,
            "lexicon": optional_file_hash(e.lexicon.as_ref())?,
            "url": e.url,
            "command": e.command,
            "max_failure_fraction": e.max_failure_fraction,
        }));
        stages.push(run_stage("extend", &ext_dir, &fp, None, &[crate::extension::EXTENSIONS_FILE], || {
            let generator = build_generator(e)?;
            let cache = extension_cache(e, out)?;
            let report = extend_documents(&corpus, generator.as_ref(), e, &cache)?;
            Ok(write_extensions(&ext_dir, &report)?)
        })?);
        Some(fp)
    } else {
        stages.push(skipped("extend"));
        None
    };
    let extensions = match ext_fp {
        Some(_) => Some(load_extensions(&ext_dir)?),
        None => None,
    };

    // train
    let model_dir = out.join(MODEL_DIR);
    let train_seed = stage_seed(config.seed, "train");
    let train_fp = json_hash(&serde_json::json!({
        "stage": "train",
        "corpus": prepare_fp,
        "extensions": ext_fp,
        "model": config.model,
        "trainer": config.trainer,
        "encoder": config.encoder,
        "top_n": config.evaluation.top_n,
        "seed": train_seed,
    }));
    stages.push(run_stage("train", &model_dir, &train_fp, Some(train_seed), &[TOPICS_FILE], || {
        let data = training_data(&corpus, extensions.as_deref(), &config.model, &config.corpus)?;
        train_model(
            &data,
            &config.model,
            &config.trainer,
            &config.encoder,
            train_seed,
            &model_dir,
            config.evaluation.top_n,
        )?;
        Ok(())
    })?);

    // evaluate
    let eval_dir = out.join(METRICS_DIR).join("evaluation");
    let ev = &config.evaluation;
    let eval_fp = json_hash(&serde_json::json!({
        "stage": "evaluate",
        "model": train_fp,
        "window": ev.window,
        "rbo_persistence": ev.rbo_persistence,
        "reference": ev.reference,
    }));
    stages.push(run_stage("evaluate", &eval_dir, &eval_fp, None, &[EVALUATION_FILE], || {
        let topics = load_topics(&model_dir.join(TOPICS_FILE))?;
        let vocabulary = read_vocabulary(&model_dir)?;
        let reference = reference_tokens(ev.reference, &config.model, &corpus, extensions.as_deref(), &config.corpus)?;
        let report = evaluate_topics(&topics, &vocabulary, &reference, &[Metric::Cv, Metric::Irbo], ev)?;
        write_json(&eval_dir.join(EVALUATION_FILE), &report)
    })?);

    // classify
    let labelled = corpus.documents.iter().all(|d| d.label.is_some());
    if labelled && !ev.classifiers.is_empty() {
        let class_dir = out.join(METRICS_DIR).join("classification");
        let class_seed = stage_seed(config.seed, "classify");
        let class_fp = json_hash(&serde_json::json!({
            "stage": "classify",
            "model": train_fp,
            "classifiers": ev.classifiers,
            "folds": ev.folds,
            "seed": class_seed,
        }));
        stages.push(run_stage(
            "classify",
            &class_dir,
            &class_fp,
            Some(class_seed),
            &[CLASSIFICATION_FILE],
            || {
                let doc_topic = load_doc_topic(&model_dir)?;
                let labels: Vec<Option<String>> = corpus.documents.iter().map(|d| d.label.clone()).collect();
                let reports = classify_topics(&doc_topic, &labels, &ev.classifiers, ev.folds, class_seed)?;
                write_json(&class_dir.join(CLASSIFICATION_FILE), &reports)
            },
        )?);
    } else {
        if !labelled {
            log::warn!("corpus has unlabeled documents; skipping classification");
        }
        stages.push(skipped("classify"));
    }

    let manifest = RunManifest {
        format: MANIFEST_FORMAT.into(),
        version: version.into(),
        config_hash: json_hash(config),
        seed: config.seed,
        stages,
    };
    write_json(&out.join(RUN_MANIFEST), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_differ_and_repeat() {
        assert_eq!(stage_seed(1, "train"), stage_seed(1, "train"));
        assert_ne!(stage_seed(1, "train"), stage_seed(1, "classify"));
        assert_ne!(stage_seed(1, "train"), stage_seed(2, "train"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::Config("x".into()).exit_code(), 2);
        let missing = PvtmError::MissingExtensions {
            variant: Variant::L2S,
            missing: 3,
        };
        assert_eq!(PipelineError::from(missing).exit_code(), 3);
        let nan = PvtmError::NaNLoss { epoch: 1, batch: vec![] };
        assert_eq!(PipelineError::from(nan).exit_code(), 4);
        let gone = PipelineError::io(Path::new("x"), std::io::Error::from(std::io::ErrorKind::NotFound));
        assert_eq!(gone.exit_code(), 3);
    }
}
