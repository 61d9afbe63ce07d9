//! Prefix-tuned variational topic model: an inference network over frozen-encoder embeddings,
//! a reparameterized Gaussian latent and a product-of-experts decoder.

mod checkpoint;
mod data;
mod model;
mod vae;

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{
    load_checkpoint, read_meta, read_topics, read_vocabulary, save_checkpoint, write_common, write_topics,
    CheckpointMeta, CHECKPOINT_META, DEFAULT_TOP_N, TOPICS_FILE,
};
pub use data::{prepare_training_data, DataOptions, InputEncoding, TargetVocabulary, TrainingData};
pub use model::{train, ElboGradient, EpochStats, PvtmModel, TrainConfig, TrainingLog};
pub use vae::{
    decode, kl_divergence, reparameterize, DocNoise, ElboTerms, GaussianPosterior, InferenceNet, LatentSample,
    PriorKind, PriorParams, TopicWordMatrix, VaeParams, LOG_VAR_MAX, LOG_VAR_MIN,
};

use crate::corpus::CorpusError;
use crate::encoder::EncoderError;
use crate::tensorfile::TensorFileError;

#[derive(Debug, Error)]
pub enum PvtmError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("loss became NaN at epoch {epoch} in batch {batch:?}")]
    NaNLoss { epoch: usize, batch: Vec<String> },
    #[error("variant {variant} needs extended texts but {missing} document(s) have no extension record")]
    MissingExtensions { variant: Variant, missing: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<TensorFileError> for PvtmError {
    fn from(e: TensorFileError) -> Self {
        PvtmError::Checkpoint(e.to_string())
    }
}

/// Which texts feed the encoder (first letter) and which texts are reconstructed (second).
/// `S` is the original short text, `L` the generated long text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    S2S,
    L2S,
    L2L,
    #[default]
    S2L,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::S2S, Variant::L2S, Variant::L2L, Variant::S2L];

    pub fn long_input(self) -> bool {
        matches!(self, Variant::L2S | Variant::L2L)
    }

    pub fn long_target(self) -> bool {
        matches!(self, Variant::L2L | Variant::S2L)
    }

    pub fn needs_extensions(self) -> bool {
        self.long_input() || self.long_target()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::S2S => "s2s",
            Variant::L2S => "l2s",
            Variant::L2L => "l2l",
            Variant::S2L => "s2l",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown variant {s:?} (expected s2s, l2s, l2l or s2l)"))
    }
}
