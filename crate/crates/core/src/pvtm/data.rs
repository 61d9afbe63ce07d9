use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{PvtmError, Variant};
use crate::corpus::{bow_vectorize, build_vocabulary_from_tokens, preprocess, BowVector, Corpus, CorpusError,
    PreprocessOptions, Vocabulary};
use crate::extension::ExtensionRecord;

/// What the inference network reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputEncoding {
    /// Pooled embedding from the prefix-tuned encoder.
    #[default]
    Transformer,
    /// Raw BOW counts of the input texts over the training vocabulary, with no encoder.
    Bow,
}

/// Vocabulary used for long reconstruction targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetVocabulary {
    /// Short-text vocabulary restricted to tokens that occur in the extended texts.
    #[default]
    ShortIntersectLong,
    /// A fresh vocabulary built from the extended texts with the same frequency filters.
    RebuildFromLong,
}

#[derive(Debug, Clone, Default)]
pub struct DataOptions {
    pub preprocess: PreprocessOptions,
    pub target_vocabulary: TargetVocabulary,
    pub min_df: usize,
    pub max_df_fraction: f64,
}

impl DataOptions {
    pub fn new(target_vocabulary: TargetVocabulary) -> Self {
        DataOptions {
            preprocess: PreprocessOptions::default(),
            target_vocabulary,
            min_df: 2,
            max_df_fraction: 0.5,
        }
    }
}

/// Inputs and reconstruction targets for one variant, aligned with the corpus documents.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub variant: Variant,
    pub doc_ids: Vec<String>,
    pub labels: Vec<Option<String>>,
    /// Texts fed to the encoder.
    pub inputs: Vec<String>,
    /// BOW of the input texts over `vocabulary`, for [`InputEncoding::Bow`].
    pub input_bows: Vec<BowVector>,
    pub targets: Vec<BowVector>,
    /// Preprocessed target texts, usable as a coherence reference corpus.
    pub target_tokens: Vec<Vec<String>>,
    pub vocabulary: Vocabulary,
}

impl TrainingData {
    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }
}

/// Aligns extension records with the corpus by document id and builds the variant's
/// inputs and targets.
pub fn prepare_training_data(
    variant: Variant,
    corpus: &Corpus,
    extensions: Option<&[ExtensionRecord]>,
    options: &DataOptions,
) -> Result<TrainingData, PvtmError> {
    let long_texts: Option<Vec<&str>> = if variant.needs_extensions() {
        let by_id: HashMap<&str, &str> = extensions
            .unwrap_or_default()
            .iter()
            .map(|r| (r.doc_id.as_str(), r.long_text.as_str()))
            .collect();
        let texts: Vec<Option<&str>> = corpus.documents.iter().map(|d| by_id.get(d.id.as_str()).copied()).collect();
        let missing = texts.iter().filter(|t| t.is_none()).count();
        if missing > 0 {
            return Err(PvtmError::MissingExtensions { variant, missing });
        }
        Some(texts.into_iter().flatten().collect())
    } else {
        None
    };
    let long_tokens: Option<Vec<Vec<String>>> = long_texts
        .as_ref()
        .map(|texts| texts.iter().map(|t| preprocess(t, &options.preprocess)).collect());
    let short_tokens: Vec<Vec<String>> = corpus.documents.iter().map(|d| d.tokens.clone()).collect();

    let (vocabulary, target_tokens) = match (&long_tokens, variant.long_target()) {
        (Some(long), true) => {
            let refs: Vec<&[String]> = long.iter().map(Vec::as_slice).collect();
            let vocab = match options.target_vocabulary {
                TargetVocabulary::ShortIntersectLong => corpus.vocabulary.intersect_with(refs.iter().copied()),
                TargetVocabulary::RebuildFromLong => {
                    build_vocabulary_from_tokens(&refs, options.min_df, options.max_df_fraction)?
                }
            };
            if vocab.is_empty() {
                return Err(CorpusError::EmptyVocabulary.into());
            }
            (vocab, long.clone())
        }
        _ => (corpus.vocabulary.clone(), short_tokens.clone()),
    };
    let targets = target_tokens.iter().map(|t| bow_vectorize(t, &vocabulary)).collect();

    let (inputs, input_tokens): (Vec<String>, &Vec<Vec<String>>) = match (&long_texts, variant.long_input()) {
        (Some(long), true) => (
            long.iter().map(|t| t.to_string()).collect(),
            long_tokens.as_ref().expect("long tokens exist with long texts"),
        ),
        _ => (corpus.documents.iter().map(|d| d.raw_text.clone()).collect(), &short_tokens),
    };
    let input_bows = input_tokens.iter().map(|t| bow_vectorize(t, &vocabulary)).collect();

    Ok(TrainingData {
        variant,
        doc_ids: corpus.documents.iter().map(|d| d.id.clone()).collect(),
        labels: corpus.documents.iter().map(|d| d.label.clone()).collect(),
        inputs,
        input_bows,
        targets,
        target_tokens,
        vocabulary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusOptions, RawRecord};
    use crate::extension::ExtensionStatus;

    fn corpus() -> Corpus {
        let texts = ["goal striker match", "goal match referee", "market stocks bank", "bank stocks trade"];
        let records = texts
            .iter()
            .enumerate()
            .map(|(i, t)| RawRecord {
                id: i.to_string(),
                label: Some((i / 2).to_string()),
                text: t.to_string(),
            })
            .collect();
        Corpus::build(records, &CorpusOptions::default()).unwrap()
    }

    fn records(c: &Corpus) -> Vec<ExtensionRecord> {
        c.documents
            .iter()
            .map(|d| ExtensionRecord {
                doc_id: d.id.clone(),
                short_text: d.raw_text.clone(),
                long_text: format!("{} {} referee newword", d.raw_text, d.raw_text),
                generator_name: "test".into(),
                prompt_hash: "h".into(),
                created_at: "t".into(),
                generated_tokens: 8,
                status: ExtensionStatus::Generated,
            })
            .collect()
    }

    #[test]
    fn variant_contract() {
        let c = corpus();
        let ext = records(&c);
        let opts = DataOptions::new(TargetVocabulary::ShortIntersectLong);
        let get = |v| prepare_training_data(v, &c, Some(&ext), &opts).unwrap();
        let (s2s, l2s, l2l, s2l) = (get(Variant::S2S), get(Variant::L2S), get(Variant::L2L), get(Variant::S2L));
        assert_eq!(s2s.inputs, s2l.inputs);
        assert_eq!(l2s.inputs, l2l.inputs);
        assert_eq!(s2l.targets, l2l.targets);
        assert_eq!(s2l.vocabulary, l2l.vocabulary);
        assert_eq!(s2s.targets, l2s.targets);
        assert_eq!(s2s.targets, c.bows);
        assert_ne!(s2s.inputs, l2s.inputs);
        assert!(!s2l.vocabulary.contains("newword"));
        // Long targets count every repetition of in-vocabulary words.
        assert!(s2l.targets[0].total() > s2s.targets[0].total());
    }

    #[test]
    fn missing_extensions() {
        let c = corpus();
        let opts = DataOptions::new(TargetVocabulary::ShortIntersectLong);
        for v in [Variant::L2S, Variant::L2L, Variant::S2L] {
            assert!(matches!(
                prepare_training_data(v, &c, None, &opts),
                Err(PvtmError::MissingExtensions { missing: 4, .. })
            ));
        }
        let mut ext = records(&c);
        ext.pop();
        assert!(matches!(
            prepare_training_data(Variant::S2L, &c, Some(&ext), &opts),
            Err(PvtmError::MissingExtensions { missing: 1, .. })
        ));
        assert!(prepare_training_data(Variant::S2S, &c, None, &opts).is_ok());
    }

    #[test]
    fn rebuilt_target_vocabulary() {
        let c = corpus();
        let ext = records(&c);
        let mut opts = DataOptions::new(TargetVocabulary::RebuildFromLong);
        opts.max_df_fraction = 1.0;
        let d = prepare_training_data(Variant::L2L, &c, Some(&ext), &opts).unwrap();
        assert!(d.vocabulary.contains("newword") && d.vocabulary.contains("referee"));
    }
}
