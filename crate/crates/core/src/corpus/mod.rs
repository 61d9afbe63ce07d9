//! Dataset ingestion: preprocessing, vocabulary construction and bag-of-words vectors.
//!
//! Datasets are plain UTF-8 files with one `label<TAB>text` document per line. Documents that
//! end up with no in-vocabulary token are dropped and recorded so that texts, labels and BOW
//! rows stay aligned.

mod io;
mod preprocess;
mod vocab;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{read_corpus_dir, read_tsv, write_corpus_dir, BOW_FILE, BOW_SIDECAR, MANIFEST_FILE, VOCAB_FILE};
pub use preprocess::{preprocess, PreprocessOptions, Stopwords};
pub use vocab::{build_vocabulary, build_vocabulary_from_tokens, bow_vectorize, BowVector, Vocabulary};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("no documents to build a vocabulary from")]
    EmptyCorpus,
    #[error("no token satisfies the document-frequency thresholds")]
    EmptyVocabulary,
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("malformed corpus artifact: {0}")]
    Format(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl CorpusError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CorpusError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn json(path: &Path, source: serde_json::Error) -> Self {
        CorpusError::Json {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub raw_text: String,
    pub tokens: Vec<String>,
    pub label: Option<String>,
}

/// A raw dataset row before preprocessing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawRecord {
    pub id: String,
    pub label: Option<String>,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    EmptyAfterPreprocessing,
    NoVocabularyTokens,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedDocument {
    pub id: String,
    pub reason: DropReason,
}

#[derive(Debug, Clone)]
pub struct CorpusOptions {
    pub preprocess: PreprocessOptions,
    pub min_df: usize,
    pub max_df_fraction: f64,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        Self {
            preprocess: PreprocessOptions::default(),
            min_df: 2,
            max_df_fraction: 0.5,
        }
    }
}

/// Retained documents with their vocabulary and aligned BOW rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub vocabulary: Vocabulary,
    pub bows: Vec<BowVector>,
    pub dropped: Vec<DroppedDocument>,
}

impl Corpus {
    /// Preprocesses, builds the vocabulary and vectorizes. Documents left without any
    /// in-vocabulary token are dropped with a warning.
    pub fn build(records: Vec<RawRecord>, options: &CorpusOptions) -> Result<Self, CorpusError> {
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(CorpusError::DuplicateId(r.id.clone()));
            }
        }

        let mut dropped = Vec::new();
        let mut documents = Vec::with_capacity(records.len());
        for r in records {
            let tokens = preprocess(&r.text, &options.preprocess);
            if tokens.is_empty() {
                log::warn!("dropping document {}: empty after preprocessing", r.id);
                dropped.push(DroppedDocument {
                    id: r.id,
                    reason: DropReason::EmptyAfterPreprocessing,
                });
                continue;
            }
            documents.push(Document {
                id: r.id,
                raw_text: r.text,
                tokens,
                label: r.label,
            });
        }

        let vocabulary = build_vocabulary(&documents, options.min_df, options.max_df_fraction)?;

        let mut kept = Vec::with_capacity(documents.len());
        let mut bows = Vec::with_capacity(documents.len());
        for d in documents {
            let bow = bow_vectorize(&d.tokens, &vocabulary);
            if bow.is_empty() {
                log::warn!("dropping document {}: no in-vocabulary tokens", d.id);
                dropped.push(DroppedDocument {
                    id: d.id,
                    reason: DropReason::NoVocabularyTokens,
                });
                continue;
            }
            kept.push(d);
            bows.push(bow);
        }
        if kept.is_empty() {
            return Err(CorpusError::EmptyCorpus);
        }
        Ok(Corpus {
            documents: kept,
            vocabulary,
            bows,
            dropped,
        })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.documents.iter().map(|d| d.raw_text.as_str()).collect()
    }

    pub fn token_lists(&self) -> Vec<&[String]> {
        self.documents.iter().map(|d| d.tokens.as_slice()).collect()
    }

    pub fn labels(&self) -> Vec<Option<&str>> {
        self.documents.iter().map(|d| d.label.as_deref()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, label: &str, text: &str) -> RawRecord {
        RawRecord {
            id: id.into(),
            label: Some(label.into()),
            text: text.into(),
        }
    }

    #[test]
    fn build_drops_empty_and_oov_documents() {
        let records = vec![
            rec("0", "s", "football match tonight"),
            rec("1", "s", "the and of"),
            rec("2", "s", "football match"),
            rec("3", "b", "zebra"),
            rec("4", "b", "market stocks football"),
            rec("5", "b", "market stocks"),
        ];
        let opts = CorpusOptions {
            max_df_fraction: 1.0,
            ..Default::default()
        };
        let c = Corpus::build(records, &opts).unwrap();
        let ids: Vec<&str> = c.documents.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, vec!["0", "2", "4", "5"]);
        assert_eq!(c.dropped.len(), 2);
        assert_eq!(c.dropped[0].reason, DropReason::EmptyAfterPreprocessing);
        assert_eq!(c.dropped[1].reason, DropReason::NoVocabularyTokens);
        assert!(c.bows.iter().all(|b| b.total() > 0));
        assert_eq!(c.bows.len(), c.documents.len());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let records = vec![rec("0", "a", "alpha beta"), rec("0", "a", "gamma delta")];
        assert!(matches!(
            Corpus::build(records, &CorpusOptions::default()),
            Err(CorpusError::DuplicateId(_))
        ));
    }
}
