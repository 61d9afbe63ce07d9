use std::collections::{BTreeSet, HashMap};

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{EvalError, TopicSet};

pub const DEFAULT_WINDOW: usize = 110;
pub const NPMI_EPS: f64 = 1e-12;

/// Boolean sliding-window counts for a fixed word list over a reference corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceTables {
    pub words: Vec<String>,
    pub window: usize,
    pub num_windows: usize,
    /// Windows containing each word.
    pub freq: Array1<f64>,
    /// Windows containing both words; the diagonal equals `freq`.
    pub joint: Array2<f64>,
    pub epsilon: f64,
    index: HashMap<String, usize>,
}

impl CoherenceTables {
    /// Counts windows of `window` consecutive tokens, sliding by one. Documents shorter than
    /// the window form a single window.
    pub fn build<D: AsRef<[String]>>(
        reference: &[D],
        words: impl IntoIterator<Item = String>,
        window: usize,
    ) -> Result<Self, EvalError> {
        if window < 1 {
            return Err(EvalError::InvalidInput("window must be >= 1".into()));
        }
        let words: Vec<String> = words.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
        let index: HashMap<String, usize> = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        let n = words.len();
        let mut freq = Array1::zeros(n);
        let mut joint = Array2::zeros((n, n));
        let mut num_windows = 0usize;
        let mut present: Vec<usize> = Vec::new();
        for doc in reference {
            let ids: Vec<Option<usize>> = doc.as_ref().iter().map(|t| index.get(t).copied()).collect();
            if ids.is_empty() {
                continue;
            }
            let width = window.min(ids.len());
            let mut counts = vec![0usize; n];
            for id in ids[..width].iter().flatten() {
                counts[*id] += 1;
            }
            for start in 0..=ids.len() - width {
                if start > 0 {
                    if let Some(out) = ids[start - 1] {
                        counts[out] -= 1;
                    }
                    if let Some(inc) = ids[start + width - 1] {
                        counts[inc] += 1;
                    }
                }
                num_windows += 1;
                present.clear();
                present.extend((0..n).filter(|&i| counts[i] > 0));
                for &i in &present {
                    freq[i] += 1.0;
                    for &j in &present {
                        joint[[i, j]] += 1.0;
                    }
                }
            }
        }
        Ok(CoherenceTables {
            words,
            window,
            num_windows,
            freq,
            joint,
            epsilon: NPMI_EPS,
            index,
        })
    }

    pub fn word_index(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    /// Normalized PMI from window probabilities. Pairs that co-occur in every window score 1.
    /// Zero-support words fall back to epsilon marginals.
    pub fn npmi(&self, i: usize, j: usize) -> f64 {
        let n = self.num_windows.max(1) as f64;
        let p_ij = self.joint[[i, j]] / n;
        if p_ij >= 1.0 {
            return 1.0;
        }
        let p_i = (self.freq[i] / n).max(self.epsilon);
        let p_j = (self.freq[j] / n).max(self.epsilon);
        let pmi = ((p_ij + self.epsilon) / (p_i * p_j)).ln();
        pmi / -(p_ij + self.epsilon).ln()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    pub cv: f64,
    pub per_topic: Vec<f64>,
    /// Words with no occurrence in the reference corpus.
    pub zero_support: Vec<String>,
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(b) / (na * nb)
    }
}

/// C_V coherence: per topic, each word's NPMI vector against the topic's words is compared by
/// cosine with the sum of all those vectors; topic scores average over words and the total
/// averages over topics.
pub fn c_v<D: AsRef<[String]>>(topics: &TopicSet, reference: &[D], window: usize) -> Result<CoherenceReport, EvalError> {
    if topics.is_empty() {
        return Err(EvalError::TooFewTopics { needed: 1, found: 0 });
    }
    let words = topics.topics.iter().flatten().cloned();
    let tables = CoherenceTables::build(reference, words, window)?;
    let zero_support: Vec<String> = tables
        .words
        .iter()
        .enumerate()
        .filter(|&(i, _)| tables.freq[i] == 0.0)
        .map(|(_, w)| w.clone())
        .collect();
    for w in &zero_support {
        log::warn!("topic word {w:?} never occurs in the reference corpus; using smoothed counts");
    }
    let mut per_topic = Vec::with_capacity(topics.len());
    for topic in &topics.topics {
        let ids: Vec<usize> = topic
            .iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(|w| tables.word_index(w).expect("indexed above"))
            .collect();
        if ids.is_empty() {
            per_topic.push(0.0);
            continue;
        }
        let vectors: Vec<Array1<f64>> = ids
            .iter()
            .map(|&i| ids.iter().map(|&j| tables.npmi(i, j)).collect())
            .collect();
        let total = vectors.iter().fold(Array1::zeros(ids.len()), |acc, v| acc + v);
        let score = vectors.iter().map(|v| cosine(v, &total)).sum::<f64>() / ids.len() as f64;
        per_topic.push(score);
    }
    let cv = per_topic.iter().sum::<f64>() / per_topic.len() as f64;
    Ok(CoherenceReport {
        cv,
        per_topic,
        zero_support,
    })
}
