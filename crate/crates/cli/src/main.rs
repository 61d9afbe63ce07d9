use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use shorttopic::corpus::Vocabulary;
use shorttopic::evaluation::ClassifierKind;
use shorttopic::pipeline::{
    build_generator, checkpoint_topics, classify_topics, evaluate_topics, extension_cache, extend_documents,
    load_corpus, load_doc_topic, load_extensions, load_topics, prepare_corpus, reference_tokens, run_pipeline_file,
    save_corpus, train_model, training_data, CorpusSettings, EncoderSettings, EvaluationSettings, ExtensionSettings,
    GeneratorKind, Metric, ModelKind, ModelSettings, PipelineError, ReferenceCorpus, TrainerSettings,
};
use shorttopic::pvtm::{TargetVocabulary, Variant};

#[derive(Parser)]
#[command(name = "shorttopic", version, about = "Short-text topic modeling toolkit")]
struct Cli {
    /// Print errors as JSON objects on stderr.
    #[arg(long, global = true)]
    json: bool,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a corpus directory from a `label<TAB>text` file.
    Prepare(PrepareArgs),
    /// Generate long texts for every document of a corpus.
    Extend(ExtendArgs),
    /// Fit a topic model and write its checkpoint.
    Train(TrainArgs),
    /// Print the top words of a checkpoint's topics.
    Topics(TopicsArgs),
    /// Score a topics file for coherence and diversity.
    Evaluate(EvaluateArgs),
    /// Cross-validated classification on a model's document-topic features.
    Classify(ClassifyArgs),
    /// Run the whole pipeline from a config file.
    Run(RunArgs),
}

#[derive(Args)]
struct PrepareArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    min_df: usize,
    #[arg(long, default_value_t = 0.5)]
    max_df: f64,
    #[arg(long, default_value_t = 3)]
    min_token_len: usize,
    /// Newline-separated stopword list replacing the built-in one.
    #[arg(long)]
    stopwords: Option<PathBuf>,
}

#[derive(Args)]
struct ExtendArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "mock-lexicon")]
    generator: GeneratorKind,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to `cache/extensions` next to the output directory.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    max_new_tokens: usize,
    #[arg(long, default_value_t = 5)]
    beam_size: usize,
    #[arg(long, default_value = "default")]
    template: String,
    /// Endpoint of the remote generator.
    #[arg(long)]
    url: Option<String>,
    /// Environment variable holding the remote generator's bearer token.
    #[arg(long, default_value = shorttopic::extension::DEFAULT_TOKEN_ENV)]
    token_env: String,
    /// Local decoder program followed by its arguments.
    #[arg(long, num_args = 1.., allow_hyphen_values = true)]
    command: Vec<String>,
    #[arg(long)]
    lexicon: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    echo_repeat: usize,
    #[arg(long, default_value_t = 4)]
    max_parallel: usize,
    #[arg(long, default_value_t = 0.1)]
    max_failure_fraction: f64,
}

/// Optional file form of the training flags.
#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    #[serde(default)]
    model: Option<ModelSettings>,
    #[serde(default)]
    trainer: Option<TrainerSettings>,
    #[serde(default)]
    encoder: Option<EncoderSettings>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Directory written by `extend`; required by every variant except s2s.
    #[arg(long)]
    extensions: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    k: Option<usize>,
    /// JSON file with optional `model`, `trainer` and `encoder` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    base_model: Option<String>,
    #[arg(long)]
    rebuild_target_vocabulary: bool,
    #[arg(long, default_value_t = 10)]
    top_n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TopicsArgs {
    /// Checkpoint directory.
    #[arg(long)]
    model: PathBuf,
    /// Number of topics to print; all by default.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 10)]
    n: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    topics: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Extended texts, for a long reference corpus.
    #[arg(long)]
    extensions: Option<PathBuf>,
    #[arg(long, default_value = "short")]
    reference: String,
    #[arg(long, value_delimiter = ',', default_value = "cv,irbo")]
    metrics: Vec<Metric>,
    #[arg(long, default_value_t = shorttopic::evaluation::DEFAULT_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = shorttopic::evaluation::DEFAULT_PERSISTENCE)]
    rbo_p: f64,
}

#[derive(Args)]
struct ClassifyArgs {
    /// Checkpoint directory.
    #[arg(long)]
    model: PathBuf,
    /// Corpus the model was trained on; supplies the labels.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "lr")]
    clf: ClassifierKind,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
}

fn config_error(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Config(e.to_string())
}

fn prepare(args: PrepareArgs) -> Result<(), PipelineError> {
    let settings = CorpusSettings {
        min_df: args.min_df,
        max_df_fraction: args.max_df,
        min_token_len: args.min_token_len,
        stopwords: args.stopwords,
    };
    let corpus = prepare_corpus(&args.input, &settings)?;
    save_corpus(&args.out, &corpus, &settings)?;
    print_json(&serde_json::json!({
        "documents": corpus.len(),
        "vocab_size": corpus.vocabulary.len(),
        "dropped": corpus.dropped.len(),
    }));
    Ok(())
}

fn extend(args: ExtendArgs) -> Result<(), PipelineError> {
    let (corpus, _) = load_corpus(&args.corpus)?;
    let cache_dir = args.cache.unwrap_or_else(|| {
        args.out
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("cache")
            .join("extensions")
    });
    let settings = ExtensionSettings {
        generator: args.generator,
        template_id: args.template,
        max_new_tokens: args.max_new_tokens,
        beam_size: args.beam_size,
        echo_repeat: args.echo_repeat,
        lexicon: args.lexicon,
        url: args.url,
        token_env: args.token_env,
        command: args.command,
        max_parallel: args.max_parallel,
        max_failure_fraction: args.max_failure_fraction,
        cache_dir: Some(cache_dir),
        ..Default::default()
    };
    settings.params().validate()?;
    let generator = build_generator(&settings)?;
    let cache = extension_cache(&settings, &args.out)?;
    let report = extend_documents(&corpus, generator.as_ref(), &settings, &cache)?;
    shorttopic::extension::write_extensions(&args.out, &report)?;
    print_json(&serde_json::json!({
        "records": report.records.len(),
        "cache_hits": report.cache_hits,
        "generator_calls": report.generator_calls,
        "fallbacks": report.fallbacks,
        "failures": report.failures,
    }));
    Ok(())
}

fn train(args: TrainArgs) -> Result<(), PipelineError> {
    let file: TrainFile = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| PipelineError::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?
        }
        None => TrainFile::default(),
    };
    let mut model = file.model.unwrap_or_default();
    let mut trainer = file.trainer.unwrap_or_default();
    let mut encoder = file.encoder.unwrap_or_default();
    if let Some(kind) = args.model {
        model.kind = kind;
    }
    if let Some(v) = args.variant {
        model.variant = v;
    }
    if let Some(k) = args.k {
        model.num_topics = k;
    }
    if args.rebuild_target_vocabulary {
        model.target_vocabulary = TargetVocabulary::RebuildFromLong;
    }
    if let Some(e) = args.epochs {
        trainer.epochs = e;
    }
    if let Some(b) = args.base_model {
        encoder.base_model = b;
    }
    trainer.train_config(&model, &encoder, args.seed).validate()?;

    let (corpus, corpus_settings) = load_corpus(&args.corpus)?;
    let extensions = match &args.extensions {
        Some(dir) => Some(load_extensions(dir)?),
        None => None,
    };
    let data = training_data(&corpus, extensions.as_deref(), &model, &corpus_settings)?;
    let trained = train_model(&data, &model, &trainer, &encoder, args.seed, &args.out, args.top_n)?;
    print_json(&serde_json::json!({
        "model": model.kind.as_str(),
        "num_topics": model.num_topics,
        "documents": data.len(),
        "vocab_size": trained.vocabulary.len(),
        "final_loss": trained.losses.as_ref().and_then(|l| l.last()),
        "checkpoint": args.out,
    }));
    Ok(())
}

fn topics(args: TopicsArgs) -> Result<(), PipelineError> {
    for words in checkpoint_topics(&args.model, args.k, args.n)? {
        println!("{}", words.join(" "));
    }
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<(), PipelineError> {
    let reference_kind = match args.reference.as_str() {
        "short" => ReferenceCorpus::Short,
        "long" => ReferenceCorpus::Long,
        other => return Err(config_error(format!("unknown reference corpus {other:?} (expected short or long)"))),
    };
    let topics = load_topics(&args.topics)?;
    let (corpus, corpus_settings) = load_corpus(&args.corpus)?;
    let extensions = match &args.extensions {
        Some(dir) => Some(load_extensions(dir)?),
        None => None,
    };
    let reference = reference_tokens(
        reference_kind,
        &ModelSettings::default(),
        &corpus,
        extensions.as_deref(),
        &corpus_settings,
    )?;
    let vocabulary = Vocabulary::from_tokens(reference.iter().flatten().map(String::as_str));
    let settings = EvaluationSettings {
        window: args.window,
        rbo_persistence: args.rbo_p,
        ..Default::default()
    };
    let report = evaluate_topics(&topics, &vocabulary, &reference, &args.metrics, &settings)?;
    for v in &report.violations {
        eprintln!("warning: topic {} word {:?} ignored ({:?})", v.topic, v.word, v.issue);
    }
    let mut out = serde_json::Map::new();
    if let Some(cv) = report.cv {
        out.insert("cv".into(), cv.into());
        out.insert("per_topic".into(), serde_json::to_value(&report.per_topic).unwrap());
    }
    if let Some(irbo) = report.irbo {
        out.insert("irbo".into(), irbo.into());
    }
    out.insert("violations".into(), serde_json::to_value(&report.violations).unwrap());
    print_json(&out);
    Ok(())
}

fn classify(args: ClassifyArgs) -> Result<(), PipelineError> {
    let doc_topic = load_doc_topic(&args.model)?;
    let (corpus, _) = load_corpus(&args.corpus)?;
    let labels: Vec<Option<String>> = corpus.documents.iter().map(|d| d.label.clone()).collect();
    let mut reports = classify_topics(&doc_topic, &labels, &[args.clf], args.folds, args.seed)?;
    let (_, report) = reports.pop_first().expect("one classifier requested");
    print_json(&report);
    Ok(())
}

fn run(args: RunArgs) -> Result<(), PipelineError> {
    let manifest = run_pipeline_file(&args.config)?;
    print_json(&manifest);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Prepare(a) => prepare(a),
        Command::Extend(a) => extend(a),
        Command::Train(a) => train(a),
        Command::Topics(a) => topics(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Classify(a) => classify(a),
        Command::Run(a) => run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            if cli.json {
                let body = serde_json::json!({ "error": e.kind(), "message": e.to_string(), "exit_code": code });
                eprintln!("{body}");
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(code as u8)
        }
    }
}
