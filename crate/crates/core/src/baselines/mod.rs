//! Classical topic models: LDA by collapsed Gibbs sampling and NMF by multiplicative updates.
//! Both write the same checkpoint layout as the variational model.

mod lda;
mod nmf;

use std::path::Path;

use ndarray::Array2;
use serde::Serialize;
use thiserror::Error;

pub use lda::{lda_gibbs, GibbsState, LdaConfig, LdaResult};
pub use nmf::{nmf, NmfConfig, NmfFactors, NMF_EPS};

use crate::corpus::{BowVector, Vocabulary};
use crate::pvtm::{write_common, CheckpointMeta, PvtmError, DEFAULT_TOP_N};
use crate::tensorfile::TensorFile;
use crate::util::top_word_ids;

pub const TENSORS_FILE: &str = "tensors.bin";

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("invalid baseline configuration: {0}")]
    InvalidConfig(String),
    #[error("matrix entry ({row}, {col}) is negative or not finite")]
    NegativeInput { row: usize, col: usize },
    #[error(transparent)]
    Checkpoint(#[from] PvtmError),
}

/// Dense `D x V` count matrix.
pub fn bow_matrix(bows: &[BowVector]) -> Array2<f64> {
    let v = bows.first().map_or(0, BowVector::dim);
    let mut m = Array2::zeros((bows.len(), v));
    for (d, b) in bows.iter().enumerate() {
        for &(w, c) in b.entries() {
            m[[d, w]] = c as f64;
        }
    }
    m
}

/// Document-topic and topic-word distributions of a fitted baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedTopics {
    pub kind: String,
    pub doc_topic: Array2<f64>,
    pub topic_word: Array2<f64>,
}

impl FittedTopics {
    pub fn top_words(&self, vocabulary: &Vocabulary, n: usize) -> Vec<Vec<String>> {
        top_word_ids(&self.topic_word, n)
            .into_iter()
            .map(|ids| ids.into_iter().filter_map(|i| vocabulary.token(i).map(str::to_owned)).collect())
            .collect()
    }
}

/// Writes `model.json`, `vocab.json`, `topics.txt` and a tensor file with both matrices.
pub fn save_baseline<C: Serialize>(
    dir: &Path,
    fitted: &FittedTopics,
    vocabulary: &Vocabulary,
    config: &C,
    seed: u64,
) -> Result<(), BaselineError> {
    let k = fitted.topic_word.nrows();
    let meta = CheckpointMeta::new(
        &fitted.kind,
        k,
        vocabulary.len(),
        seed,
        serde_json::to_value(config).expect("config serializes"),
    );
    let topics = fitted.top_words(vocabulary, DEFAULT_TOP_N.min(vocabulary.len()));
    write_common(dir, &meta, vocabulary, &topics)?;
    let mut tf = TensorFile::new(serde_json::json!({ "kind": fitted.kind }));
    tf.push("doc_topic", &fitted.doc_topic);
    tf.push("topic_word", &fitted.topic_word);
    tf.save(&dir.join(TENSORS_FILE)).map_err(PvtmError::from)?;
    Ok(())
}

/// Reads the document-topic matrix of a baseline checkpoint.
pub fn load_doc_topic(dir: &Path) -> Result<Array2<f64>, BaselineError> {
    let tf = TensorFile::load(&dir.join(TENSORS_FILE)).map_err(PvtmError::from)?;
    Ok(tf.get2("doc_topic").map_err(PvtmError::from)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_matrix_and_checkpoint() {
        let bows = vec![
            BowVector::from_entries(3, vec![(0, 2)]),
            BowVector::from_entries(3, vec![(1, 1), (2, 4)]),
        ];
        let m = bow_matrix(&bows);
        assert_eq!(m, ndarray::array![[2.0, 0.0, 0.0], [0.0, 1.0, 4.0]]);

        let (f, _) = nmf(&m, &NmfConfig { num_topics: 2, iterations: 20, seed: 0 }).unwrap();
        let fitted = FittedTopics {
            kind: "nmf".into(),
            doc_topic: f.doc_topic(),
            topic_word: f.topic_word(),
        };
        let vocab = Vocabulary::from_tokens(["aaa", "bbb", "ccc"]);
        let dir = tempfile::tempdir().unwrap();
        save_baseline(dir.path(), &fitted, &vocab, &NmfConfig::default(), 0).unwrap();
        let topics = std::fs::read_to_string(dir.path().join(crate::pvtm::TOPICS_FILE)).unwrap();
        assert_eq!(topics.lines().count(), 2);
        assert!(topics.lines().all(|l| l.split(' ').count() == 3));
        assert_eq!(load_doc_topic(dir.path()).unwrap(), fitted.doc_topic);
        assert_eq!(crate::pvtm::read_meta(dir.path()).unwrap().kind, "nmf");
    }
}
