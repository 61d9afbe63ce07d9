//! Short-text extension: prompt templating, generator calls with retries, and a restartable
//! on-disk cache of generated long texts.

mod cache;
mod generator;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{read_extensions, write_extensions, ExtensionCache, EXTENSIONS_FILE, REPORT_FILE};
pub use generator::{
    CommandGenerator, GenerationRequest, Generator, GeneratorError, Lexicon, MockEchoGenerator,
    MockLexiconGenerator, RemoteGenerator, DEFAULT_TOKEN_ENV,
};

use crate::util::json_hash;

pub const DEFAULT_TEMPLATE_ID: &str = "default";
const SHORT_TEXT_SLOT: &str = "{Short Text}";

const TEMPLATES: &[(&str, &str)] = &[
    (
        DEFAULT_TEMPLATE_ID,
        "Given the short text: \"{Short Text}\", expand it into a detailed paragraph that provides \
         background and elaborates on the key points to enrich its context. Try to make it as \
         detailed as possible.",
    ),
    ("raw", "{Short Text}"),
];

#[derive(Debug, Error)]
pub enum ExtensionError {
    #[error("unknown prompt template {0:?}")]
    UnknownTemplate(String),
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
    #[error("generator unavailable after {attempts} attempt(s): {last_error}")]
    GeneratorUnavailable { attempts: usize, last_error: String },
    #[error("generator returned no tokens")]
    EmptyGeneration,
    #[error("{failed} of {total} extensions failed, above the allowed fraction {threshold}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        threshold: f64,
        report: Box<ExtensionReport>,
    },
    #[error("extension cache error on {path}: {message}")]
    Cache { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub max_new_tokens: usize,
    pub beam_size: usize,
    pub template_id: String,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            max_new_tokens: 500,
            beam_size: 5,
            template_id: DEFAULT_TEMPLATE_ID.into(),
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<(), ExtensionError> {
        if self.max_new_tokens < 1 {
            return Err(ExtensionError::InvalidParams("max_new_tokens must be >= 1".into()));
        }
        if self.beam_size < 1 {
            return Err(ExtensionError::InvalidParams("beam_size must be >= 1".into()));
        }
        template(&self.template_id).map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtensionStatus {
    Generated,
    /// The generator produced nothing; `long_text` is a copy of the short text.
    FallbackShortText,
}

/// A short text paired with its generated long text and provenance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtensionRecord {
    pub doc_id: String,
    pub short_text: String,
    pub long_text: String,
    pub generator_name: String,
    pub prompt_hash: String,
    pub created_at: String,
    pub generated_tokens: usize,
    pub status: ExtensionStatus,
}

pub fn template(template_id: &str) -> Result<&'static str, ExtensionError> {
    TEMPLATES
        .iter()
        .find(|(id, _)| *id == template_id)
        .map(|(_, t)| *t)
        .ok_or_else(|| ExtensionError::UnknownTemplate(template_id.to_owned()))
}

pub fn render_prompt(short_text: &str, template_id: &str) -> Result<String, ExtensionError> {
    Ok(template(template_id)?.replace(SHORT_TEXT_SLOT, short_text))
}

/// Cache key over the template text, the short text and the generation parameters.
pub fn prompt_hash(short_text: &str, params: &GenerationParams) -> Result<String, ExtensionError> {
    let template = template(&params.template_id)?;
    Ok(json_hash(&serde_json::json!({
        "template": template,
        "short_text": short_text,
        "max_new_tokens": params.max_new_tokens,
        "beam_size": params.beam_size,
    })))
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_backoff: Duration::from_millis(500),
        }
    }
}

/// Keeps the first `max_tokens` whitespace-separated tokens.
fn truncate_tokens(text: &str, max_tokens: usize) -> (String, usize) {
    let tokens: Vec<&str> = text.split_whitespace().take(max_tokens).collect();
    (tokens.join(" "), tokens.len())
}

fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn call_with_retries(
    generator: &dyn Generator,
    request: &GenerationRequest<'_>,
    retry: &RetryPolicy,
) -> Result<String, ExtensionError> {
    let attempts = retry.max_attempts.max(1);
    let mut backoff = retry.initial_backoff;
    let mut last_error = String::new();
    for attempt in 1..=attempts {
        match generator.generate(request) {
            Ok(text) => return Ok(text),
            Err(GeneratorError::Fatal(m)) => {
                return Err(ExtensionError::GeneratorUnavailable {
                    attempts: attempt,
                    last_error: m,
                })
            }
            Err(GeneratorError::Transport(m)) => {
                log::warn!("generator attempt {attempt}/{attempts} failed: {m}");
                last_error = m;
                if attempt < attempts {
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
            }
        }
    }
    Err(ExtensionError::GeneratorUnavailable { attempts, last_error })
}

/// Generates the long text for one short text, truncated to `max_new_tokens` tokens.
pub fn extend(
    doc_id: &str,
    short_text: &str,
    generator: &dyn Generator,
    params: &GenerationParams,
    retry: &RetryPolicy,
) -> Result<ExtensionRecord, ExtensionError> {
    params.validate()?;
    let prompt = render_prompt(short_text, &params.template_id)?;
    let request = GenerationRequest {
        prompt: &prompt,
        short_text,
        max_new_tokens: params.max_new_tokens,
        beam_size: params.beam_size,
    };
    let raw = call_with_retries(generator, &request, retry)?;
    let (long_text, generated_tokens) = truncate_tokens(&raw, params.max_new_tokens);
    if generated_tokens == 0 {
        return Err(ExtensionError::EmptyGeneration);
    }
    Ok(ExtensionRecord {
        doc_id: doc_id.to_owned(),
        short_text: short_text.to_owned(),
        long_text,
        generator_name: generator.name().to_owned(),
        prompt_hash: prompt_hash(short_text, params)?,
        created_at: now_rfc3339(),
        generated_tokens,
        status: ExtensionStatus::Generated,
    })
}

#[derive(Debug, Clone)]
pub struct ExtendOptions {
    pub max_parallel: usize,
    /// Abort when more than this fraction of documents fail.
    pub max_failure_fraction: f64,
    pub retry: RetryPolicy,
}

impl Default for ExtendOptions {
    fn default() -> Self {
        ExtendOptions {
            max_parallel: 4,
            max_failure_fraction: 0.1,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtensionFailure {
    pub doc_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtensionReport {
    /// Successful records, in corpus order.
    pub records: Vec<ExtensionRecord>,
    pub failures: Vec<ExtensionFailure>,
    pub cache_hits: usize,
    pub generator_calls: usize,
    pub fallbacks: usize,
}

enum Outcome {
    Hit(ExtensionRecord),
    Fresh(ExtensionRecord),
    Failed(String),
}

fn extend_one(
    doc_id: &str,
    short_text: &str,
    generator: &dyn Generator,
    params: &GenerationParams,
    cache: &ExtensionCache,
    retry: &RetryPolicy,
    calls: &AtomicUsize,
) -> Result<Outcome, ExtensionError> {
    let hash = prompt_hash(short_text, params)?;
    if let Some(mut rec) = cache.get(generator.name(), &hash)? {
        if rec.short_text == short_text {
            rec.doc_id = doc_id.to_owned();
            return Ok(Outcome::Hit(rec));
        }
    }
    calls.fetch_add(1, Ordering::Relaxed);
    let rec = match extend(doc_id, short_text, generator, params, retry) {
        Ok(rec) => rec,
        Err(ExtensionError::EmptyGeneration) => {
            log::warn!("empty generation for {doc_id}; falling back to the short text");
            ExtensionRecord {
                doc_id: doc_id.to_owned(),
                short_text: short_text.to_owned(),
                long_text: short_text.to_owned(),
                generator_name: generator.name().to_owned(),
                prompt_hash: hash,
                created_at: now_rfc3339(),
                generated_tokens: 0,
                status: ExtensionStatus::FallbackShortText,
            }
        }
        Err(e @ ExtensionError::GeneratorUnavailable { .. }) => return Ok(Outcome::Failed(e.to_string())),
        Err(e) => return Err(e),
    };
    cache.put(&rec)?;
    Ok(Outcome::Fresh(rec))
}

/// Extends every `(doc_id, short_text)` pair, reusing cached records whose prompt hash
/// matches. Up to `max_parallel` generator calls run at once; output order follows the input.
pub fn extend_corpus(
    docs: &[(String, String)],
    generator: &dyn Generator,
    params: &GenerationParams,
    cache: &ExtensionCache,
    options: &ExtendOptions,
) -> Result<ExtensionReport, ExtensionError> {
    params.validate()?;
    let next = AtomicUsize::new(0);
    let calls = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<Outcome, ExtensionError>>>> =
        Mutex::new((0..docs.len()).map(|_| None).collect());
    let workers = options.max_parallel.clamp(1, docs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= docs.len() {
                    break;
                }
                let (id, text) = &docs[i];
                let outcome = extend_one(id, text, generator, params, cache, &options.retry, &calls);
                slots.lock().expect("no worker panicked")[i] = Some(outcome);
            });
        }
    });

    let mut report = ExtensionReport {
        records: Vec::with_capacity(docs.len()),
        failures: Vec::new(),
        cache_hits: 0,
        generator_calls: calls.into_inner(),
        fallbacks: 0,
    };
    for (slot, (id, _)) in slots.into_inner().expect("no worker panicked").into_iter().zip(docs) {
        match slot.expect("every index processed")? {
            Outcome::Hit(rec) => {
                report.cache_hits += 1;
                report.records.push(rec);
            }
            Outcome::Fresh(rec) => {
                if rec.status == ExtensionStatus::FallbackShortText {
                    report.fallbacks += 1;
                }
                report.records.push(rec);
            }
            Outcome::Failed(error) => report.failures.push(ExtensionFailure {
                doc_id: id.clone(),
                error,
            }),
        }
    }
    let total = docs.len();
    let failed = report.failures.len();
    if total > 0 && failed as f64 / total as f64 > options.max_failure_fraction {
        return Err(ExtensionError::TooManyFailures {
            failed,
            total,
            threshold: options.max_failure_fraction,
            report: Box::new(report),
        });
    }
    Ok(report)
}
