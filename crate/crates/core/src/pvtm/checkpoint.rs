use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::data::InputEncoding;
use super::model::{PvtmModel, TrainConfig};
use super::vae::{InferenceNet, TopicWordMatrix, VaeParams};
use super::PvtmError;
use crate::corpus::Vocabulary;
use crate::encoder::{load_prefix, save_prefix, BaseEncoder};
use crate::nn::ParamSet;
use crate::tensorfile::TensorFile;
use crate::util::write_atomic;

pub const CHECKPOINT_META: &str = "model.json";
pub const TENSORS_FILE: &str = "tensors.bin";
pub const VOCAB_FILE: &str = "vocab.json";
pub const TOPICS_FILE: &str = "topics.txt";
pub const PREFIX_FILE: &str = "prefix.bin";
pub const DEFAULT_TOP_N: usize = 10;

const FORMAT: &str = "shorttopic-checkpoint";

/// `model.json`: shared by every model kind so that downstream tools only need the topics
/// dump and this header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub kind: String,
    pub k: usize,
    pub vocab_size: usize,
    pub embedding_dim: usize,
    pub variant: Option<String>,
    pub seed: u64,
    pub config: serde_json::Value,
    pub base_model: Option<String>,
    pub base_checksum: Option<String>,
    #[serde(default)]
    pub max_seq_len: Option<usize>,
}

impl CheckpointMeta {
    pub fn new(kind: &str, k: usize, vocab_size: usize, seed: u64, config: serde_json::Value) -> Self {
        CheckpointMeta {
            format: FORMAT.into(),
            kind: kind.into(),
            k,
            vocab_size,
            embedding_dim: 0,
            variant: None,
            seed,
            config,
            base_model: None,
            base_checksum: None,
            max_seq_len: None,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> PvtmError {
    PvtmError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One topic per line, words separated by single spaces.
pub fn write_topics(path: &Path, topics: &[Vec<String>]) -> Result<(), PvtmError> {
    let mut text = String::new();
    for t in topics {
        text.push_str(&t.join(" "));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes()).map_err(|e| io_err(path, e))
}

/// Writes `model.json`, `vocab.json` and `topics.txt` into `dir`.
pub fn write_common(
    dir: &Path,
    meta: &CheckpointMeta,
    vocabulary: &Vocabulary,
    topics: &[Vec<String>],
) -> Result<(), PvtmError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let meta_path = dir.join(CHECKPOINT_META);
    write_atomic(&meta_path, &serde_json::to_vec_pretty(meta).expect("meta serializes"))
        .map_err(|e| io_err(&meta_path, e))?;
    let vocab_path = dir.join(VOCAB_FILE);
    write_atomic(&vocab_path, &serde_json::to_vec(vocabulary).expect("vocab serializes"))
        .map_err(|e| io_err(&vocab_path, e))?;
    write_topics(&dir.join(TOPICS_FILE), topics)
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta, PvtmError> {
    let path = dir.join(CHECKPOINT_META);
    let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(&bytes).map_err(|e| PvtmError::Checkpoint(format!("{}: {e}", path.display())))?;
    if meta.format != FORMAT {
        return Err(PvtmError::Checkpoint(format!("{}: unknown format {:?}", path.display(), meta.format)));
    }
    Ok(meta)
}

pub fn read_vocabulary(dir: &Path) -> Result<Vocabulary, PvtmError> {
    let path = dir.join(VOCAB_FILE);
    let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| PvtmError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn save_checkpoint(model: &PvtmModel, dir: &Path) -> Result<(), PvtmError> {
    let mut meta = CheckpointMeta::new(
        "pvtm",
        model.k(),
        model.vocab_size(),
        model.config.seed,
        serde_json::to_value(&model.config).expect("config serializes"),
    );
    meta.embedding_dim = model.input_dim();
    meta.variant = Some(model.variant().to_string());
    if let Some(enc) = model.encoder() {
        meta.base_model = Some(enc.id().to_owned());
        meta.base_checksum = Some(enc.checksum());
        meta.max_seq_len = Some(enc.config().max_seq_len);
    }
    write_common(dir, &meta, &model.vocabulary, &model.top_words(DEFAULT_TOP_N.min(model.vocab_size())))?;

    let mut tf = TensorFile::new(serde_json::json!({ "kind": "pvtm" }));
    let i = &model.params.inference;
    tf.push("inference.w_hidden", &i.w_hidden);
    tf.push("inference.b_hidden", &i.b_hidden);
    tf.push("inference.w_mu", &i.w_mu);
    tf.push("inference.b_mu", &i.b_mu);
    tf.push("inference.w_log_var", &i.w_log_var);
    tf.push("inference.b_log_var", &i.b_log_var);
    tf.push("beta_logits", &model.params.beta.beta_logits);
    tf.save(&dir.join(TENSORS_FILE))?;
    if let Some(prefix) = &model.prefix {
        save_prefix(prefix, &dir.join(PREFIX_FILE))?;
    }
    Ok(())
}

/// Restores a model. Transformer-input models need their base encoder: pass it in, or let
/// it be resolved from the recorded id. Either way its checksum must match the recorded one.
pub fn load_checkpoint(dir: &Path, encoder: Option<Arc<BaseEncoder>>) -> Result<PvtmModel, PvtmError> {
    let meta = read_meta(dir)?;
    if meta.kind != "pvtm" {
        return Err(PvtmError::Checkpoint(format!("{} holds a {} model, not pvtm", dir.display(), meta.kind)));
    }
    let config: TrainConfig =
        serde_json::from_value(meta.config.clone()).map_err(|e| PvtmError::Checkpoint(e.to_string()))?;
    let vocabulary = read_vocabulary(dir)?;
    let tf = TensorFile::load(&dir.join(TENSORS_FILE))?;
    let m2 = |n: &str| -> Result<Array2<f64>, PvtmError> { Ok(tf.get2(n)?) };
    let v1 = |n: &str| -> Result<Array1<f64>, PvtmError> { Ok(tf.get1(n)?) };
    let params = VaeParams {
        inference: InferenceNet {
            w_hidden: m2("inference.w_hidden")?,
            b_hidden: v1("inference.b_hidden")?,
            w_mu: m2("inference.w_mu")?,
            b_mu: v1("inference.b_mu")?,
            w_log_var: m2("inference.w_log_var")?,
            b_log_var: v1("inference.b_log_var")?,
        },
        beta: TopicWordMatrix {
            beta_logits: m2("beta_logits")?,
        },
    };
    if !params.all_finite() {
        return Err(PvtmError::Checkpoint("non-finite parameters".into()));
    }

    let (encoder, prefix) = match config.input_encoding {
        InputEncoding::Bow => (None, None),
        InputEncoding::Transformer => {
            let id = meta
                .base_model
                .as_deref()
                .ok_or_else(|| PvtmError::Checkpoint("missing base_model".into()))?;
            let enc = match encoder {
                Some(e) => e,
                None => Arc::new(match meta.max_seq_len {
                    Some(len) => BaseEncoder::load_with_max_len(id, len)?,
                    None => BaseEncoder::load(id)?,
                }),
            };
            if meta.base_checksum.as_deref() != Some(enc.checksum().as_str()) {
                return Err(PvtmError::Checkpoint(format!(
                    "base encoder {} does not match the checksum recorded at training time",
                    enc.id()
                )));
            }
            let prefix = load_prefix(&dir.join(PREFIX_FILE), &enc)?;
            (Some(enc), Some(prefix))
        }
    };
    PvtmModel::from_parts(config, vocabulary, params, prefix, encoder)
}

/// Reads a `topics.txt` dump.
pub fn read_topics(path: &Path) -> Result<Vec<Vec<String>>, PvtmError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(str::to_owned).collect())
        .collect())
}
