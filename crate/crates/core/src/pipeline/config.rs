use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::corpus::{CorpusOptions, PreprocessOptions, Stopwords};
use crate::encoder::{DEFAULT_BASE_MODEL, DEFAULT_MAX_SEQ_LEN, DEFAULT_NUM_VIRTUAL_TOKENS};
use crate::evaluation::{ClassifierKind, DEFAULT_PERSISTENCE, DEFAULT_WINDOW};
use crate::extension::{GenerationParams, DEFAULT_TEMPLATE_ID, DEFAULT_TOKEN_ENV};
use crate::pvtm::{InputEncoding, PriorKind, TargetVocabulary, TrainConfig, Variant};

/// JSON schema of [`RunConfig`], shipped alongside the crate.
pub const RUN_CONFIG_SCHEMA: &str = include_str!("../../schema/run_config.schema.json");

/// Everything one pipeline run needs. Relative paths are resolved against the directory of
/// the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// TSV file of `label<TAB>text` lines.
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    /// Root seed; each stochastic stage derives its own seed from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub corpus: CorpusSettings,
    #[serde(default)]
    pub extension: ExtensionSettings,
    #[serde(default)]
    pub encoder: EncoderSettings,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub trainer: TrainerSettings,
    #[serde(default)]
    pub evaluation: EvaluationSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSettings {
    pub min_df: usize,
    pub max_df_fraction: f64,
    pub min_token_len: usize,
    /// Newline-separated stopword file; the built-in English list when absent.
    pub stopwords: Option<PathBuf>,
}

impl Default for CorpusSettings {
    fn default() -> Self {
        CorpusSettings {
            min_df: 2,
            max_df_fraction: 0.5,
            min_token_len: 3,
            stopwords: None,
        }
    }
}

impl CorpusSettings {
    pub fn options(&self) -> Result<CorpusOptions, PipelineError> {
        let stopwords = match &self.stopwords {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
                Stopwords::parse(&text)
            }
            None => Stopwords::english().clone(),
        };
        Ok(CorpusOptions {
            preprocess: PreprocessOptions {
                min_token_len: self.min_token_len,
                stopwords,
            },
            min_df: self.min_df,
            max_df_fraction: self.max_df_fraction,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorKind {
    Remote,
    /// A local decoder executable speaking JSON over stdin/stdout.
    Local,
    MockEcho,
    MockLexicon,
}

impl std::str::FromStr for GeneratorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| format!("unknown generator {s:?} (expected remote, local, mock-echo or mock-lexicon)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtensionSettings {
    pub generator: GeneratorKind,
    pub template_id: String,
    pub max_new_tokens: usize,
    pub beam_size: usize,
    pub echo_repeat: usize,
    /// Lexicon JSON for the lexicon mock; the bundled one when absent.
    pub lexicon: Option<PathBuf>,
    pub url: Option<String>,
    /// Environment variable holding the bearer token for the remote generator.
    pub token_env: String,
    pub timeout_secs: u64,
    /// Program and arguments of the local decoder.
    pub command: Vec<String>,
    pub max_parallel: usize,
    pub max_failure_fraction: f64,
    pub max_attempts: usize,
    /// Defaults to `<output_dir>/cache/extensions`.
    pub cache_dir: Option<PathBuf>,
}

impl Default for ExtensionSettings {
    fn default() -> Self {
        let params = GenerationParams::default();
        ExtensionSettings {
            generator: GeneratorKind::MockLexicon,
            template_id: DEFAULT_TEMPLATE_ID.into(),
            max_new_tokens: params.max_new_tokens,
            beam_size: params.beam_size,
            echo_repeat: 3,
            lexicon: None,
            url: None,
            token_env: DEFAULT_TOKEN_ENV.into(),
            timeout_secs: 120,
            command: Vec::new(),
            max_parallel: 4,
            max_failure_fraction: 0.1,
            max_attempts: 3,
            cache_dir: None,
        }
    }
}

impl ExtensionSettings {
    pub fn params(&self) -> GenerationParams {
        GenerationParams {
            max_new_tokens: self.max_new_tokens,
            beam_size: self.beam_size,
            template_id: self.template_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSettings {
    /// Built-in model id or path to a weight file.
    pub base_model: String,
    pub num_virtual_tokens: usize,
    pub max_seq_len: usize,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        EncoderSettings {
            base_model: DEFAULT_BASE_MODEL.into(),
            num_virtual_tokens: DEFAULT_NUM_VIRTUAL_TOKENS,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    #[default]
    Pvtm,
    Lda,
    Nmf,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Pvtm => "pvtm",
            ModelKind::Lda => "lda",
            ModelKind::Nmf => "nmf",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pvtm" => Ok(ModelKind::Pvtm),
            "lda" => Ok(ModelKind::Lda),
            "nmf" => Ok(ModelKind::Nmf),
            _ => Err(format!("unknown model {s:?} (expected pvtm, lda or nmf)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub kind: ModelKind,
    pub variant: Variant,
    pub num_topics: usize,
    pub target_vocabulary: TargetVocabulary,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            kind: ModelKind::Pvtm,
            variant: Variant::S2L,
            num_topics: 20,
            target_vocabulary: TargetVocabulary::ShortIntersectLong,
        }
    }
}

impl ModelSettings {
    /// Whether the run needs generated long texts.
    pub fn needs_extensions(&self) -> bool {
        self.kind == ModelKind::Pvtm && self.variant.needs_extensions()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub prefix_learning_rate: f64,
    pub hidden_size: usize,
    pub dropout: f64,
    pub prior: PriorKind,
    pub input_encoding: InputEncoding,
    pub prefix_reparam: bool,
    pub prefix_bottleneck: usize,
    pub train_prefix: bool,
    pub lda_iterations: usize,
    /// Symmetric document-topic prior; `50 / K` when absent.
    pub lda_alpha: Option<f64>,
    pub lda_eta: f64,
    pub nmf_iterations: usize,
}

impl Default for TrainerSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainerSettings {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            prefix_learning_rate: t.prefix_learning_rate,
            hidden_size: t.hidden_size,
            dropout: t.dropout,
            prior: t.prior,
            input_encoding: t.input_encoding,
            prefix_reparam: t.prefix_reparam,
            prefix_bottleneck: t.prefix_bottleneck,
            train_prefix: t.train_prefix,
            lda_iterations: 100,
            lda_alpha: None,
            lda_eta: 0.01,
            nmf_iterations: 100,
        }
    }
}

impl TrainerSettings {
    pub fn train_config(&self, model: &ModelSettings, encoder: &EncoderSettings, seed: u64) -> TrainConfig {
        TrainConfig {
            variant: model.variant,
            num_topics: model.num_topics,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            prefix_learning_rate: self.prefix_learning_rate,
            hidden_size: self.hidden_size,
            dropout: self.dropout,
            prior: self.prior,
            input_encoding: self.input_encoding,
            num_virtual_tokens: encoder.num_virtual_tokens,
            prefix_reparam: self.prefix_reparam,
            prefix_bottleneck: self.prefix_bottleneck,
            train_prefix: self.train_prefix,
            seed,
        }
    }
}

/// Which texts serve as the coherence reference corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceCorpus {
    /// The texts the model was trained to reconstruct.
    #[default]
    Target,
    Short,
    Long,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSettings {
    pub top_n: usize,
    pub window: usize,
    pub rbo_persistence: f64,
    pub reference: ReferenceCorpus,
    pub classifiers: Vec<ClassifierKind>,
    pub folds: usize,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        EvaluationSettings {
            top_n: 10,
            window: DEFAULT_WINDOW,
            rbo_persistence: DEFAULT_PERSISTENCE,
            reference: ReferenceCorpus::Target,
            classifiers: vec![ClassifierKind::LinearSvm, ClassifierKind::LogisticRegression],
            folds: 5,
        }
    }
}

impl RunConfig {
    /// Parses and validates a config file. Unknown keys are rejected with their name.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let mut config = Self::from_json(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| PipelineError::Config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset);
        fix(&mut self.output_dir);
        for p in [
            &mut self.corpus.stopwords,
            &mut self.extension.lexicon,
            &mut self.extension.cache_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.corpus.min_df < 1 || !(self.corpus.max_df_fraction > 0.0 && self.corpus.max_df_fraction <= 1.0) {
            return bad("corpus.min_df must be >= 1 and corpus.max_df_fraction in (0, 1]".into());
        }
        self.extension.params().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.extension.max_failure_fraction) {
            return bad("extension.max_failure_fraction must lie in [0, 1]".into());
        }
        if self.model.needs_extensions() {
            match self.extension.generator {
                GeneratorKind::Remote if self.extension.url.is_none() => {
                    return bad("extension.url is required for the remote generator".into())
                }
                GeneratorKind::Local if self.extension.command.is_empty() => {
                    return bad("extension.command is required for the local generator".into())
                }
                _ => {}
            }
        }
        if self.model.num_topics < 1 {
            return bad("model.num_topics must be >= 1".into());
        }
        self.trainer
            .train_config(&self.model, &self.encoder, self.seed)
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        let ev = &self.evaluation;
        if ev.top_n < 1 || ev.window < 1 || ev.folds < 2 || !(ev.rbo_persistence > 0.0 && ev.rbo_persistence < 1.0) {
            return bad("evaluation needs top_n >= 1, window >= 1, folds >= 2 and rbo_persistence in (0, 1)".into());
        }
        Ok(())
    }
}
