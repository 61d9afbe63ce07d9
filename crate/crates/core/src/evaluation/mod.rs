//! Topic quality (C_V coherence, IRBO diversity) and cross-validated classification on
//! document-topic features.

mod classify;
mod coherence;
mod rbo;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use classify::{
    classify, stratified_folds, ClassificationReport, ClassifierKind, ClassifyConfig, LinearModel,
};
pub use coherence::{c_v, CoherenceReport, CoherenceTables, DEFAULT_WINDOW, NPMI_EPS};
pub use rbo::{irbo, rbo, DEFAULT_PERSISTENCE};

use crate::corpus::Vocabulary;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("ranked lists differ in length ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least {needed} topics, got {found}")]
    TooFewTopics { needed: usize, found: usize },
    #[error("only one class present; classification is undefined")]
    DegenerateLabels,
    #[error("{0}")]
    InvalidInput(String),
}

/// Why a topic word was flagged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopicIssue {
    Duplicate,
    OutOfVocabulary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicViolation {
    pub topic: usize,
    pub word: String,
    pub issue: TopicIssue,
}

/// K ranked word lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicSet {
    pub topics: Vec<Vec<String>>,
}

impl TopicSet {
    pub fn new(topics: Vec<Vec<String>>) -> Self {
        TopicSet { topics }
    }

    pub fn len(&self) -> usize {
        self.topics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.topics.is_empty()
    }

    /// Duplicates within a topic, and words outside `vocabulary` when one is given.
    pub fn violations(&self, vocabulary: Option<&Vocabulary>) -> Vec<TopicViolation> {
        let mut out = Vec::new();
        for (t, words) in self.topics.iter().enumerate() {
            let mut seen = HashSet::new();
            for w in words {
                if !seen.insert(w.as_str()) {
                    out.push(TopicViolation {
                        topic: t,
                        word: w.clone(),
                        issue: TopicIssue::Duplicate,
                    });
                }
                if vocabulary.is_some_and(|v| !v.contains(w)) {
                    out.push(TopicViolation {
                        topic: t,
                        word: w.clone(),
                        issue: TopicIssue::OutOfVocabulary,
                    });
                }
            }
        }
        out
    }

    /// Drops duplicates and out-of-vocabulary words, logging each one, and returns what was dropped.
    pub fn restrict_to(&self, vocabulary: &Vocabulary) -> (TopicSet, Vec<TopicViolation>) {
        let violations = self.violations(Some(vocabulary));
        for v in &violations {
            log::warn!("topic {}: dropping {:?} ({:?})", v.topic, v.word, v.issue);
        }
        let topics = self
            .topics
            .iter()
            .map(|words| {
                let mut seen = HashSet::new();
                words
                    .iter()
                    .filter(|w| vocabulary.contains(w) && seen.insert(w.as_str()))
                    .cloned()
                    .collect()
            })
            .collect();
        (TopicSet { topics }, violations)
    }
}
