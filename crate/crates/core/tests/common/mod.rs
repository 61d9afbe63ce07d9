#![allow(dead_code)]

use std::collections::BTreeMap;

use ndarray::Array1;
use shorttopic::corpus::{Corpus, CorpusOptions, RawRecord};
use shorttopic::encoder::{BaseEncoder, EncoderConfig};
use shorttopic::pvtm::{prepare_training_data, DataOptions, TargetVocabulary, TrainingData, Variant};
use shorttopic::synthetic::{planted_corpus, PlantedConfig};

pub fn toy_encoder() -> BaseEncoder {
    let config = EncoderConfig {
        vocab_buckets: 64,
        hidden: 8,
        layers: 2,
        heads: 2,
        ffn: 16,
        max_seq_len: 32,
    };
    BaseEncoder::random("toy-encoder", config, 7).unwrap()
}

pub fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Dense ids for string labels, in order of first appearance.
pub fn label_ids(labels: &[Option<String>]) -> Vec<usize> {
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    labels
        .iter()
        .map(|l| {
            let l = l.as_deref().expect("labelled");
            let next = ids.len();
            *ids.entry(l).or_insert(next)
        })
        .collect()
}

fn contingency(a: &[usize], b: &[usize]) -> BTreeMap<(usize, usize), f64> {
    let mut table = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_insert(0.0) += 1.0;
    }
    table
}

/// Fraction of items whose cluster's majority label equals their own.
pub fn purity(clusters: &[usize], labels: &[usize]) -> f64 {
    let table = contingency(clusters, labels);
    let mut best: BTreeMap<usize, f64> = BTreeMap::new();
    for (&(c, _), &n) in &table {
        let e = best.entry(c).or_insert(0.0);
        *e = e.max(n);
    }
    best.values().sum::<f64>() / clusters.len() as f64
}

fn entropy(counts: impl Iterator<Item = f64>, n: f64) -> f64 {
    counts.filter(|&c| c > 0.0).map(|c| -(c / n) * (c / n).ln()).sum()
}

/// Normalized mutual information with arithmetic-mean normalization.
pub fn nmi(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let table = contingency(a, b);
    let mut ca: BTreeMap<usize, f64> = BTreeMap::new();
    let mut cb: BTreeMap<usize, f64> = BTreeMap::new();
    for (&(x, y), &c) in &table {
        *ca.entry(x).or_insert(0.0) += c;
        *cb.entry(y).or_insert(0.0) += c;
    }
    let mi: f64 = table
        .iter()
        .map(|(&(x, y), &c)| (c / n) * ((c * n) / (ca[&x] * cb[&y])).ln())
        .sum();
    let (ha, hb) = (entropy(ca.values().copied(), n), entropy(cb.values().copied(), n));
    if ha + hb == 0.0 {
        return 1.0;
    }
    mi / ((ha + hb) / 2.0)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn build_corpus(records: Vec<RawRecord>) -> Corpus {
    Corpus::build(records, &CorpusOptions::default()).unwrap()
}

pub fn planted(num_topics: usize, num_docs: usize, seed: u64) -> (Corpus, TrainingData) {
    let records = planted_corpus(&PlantedConfig {
        num_topics,
        num_docs,
        seed,
        ..PlantedConfig::default()
    });
    let corpus = build_corpus(records);
    let data = prepare_training_data(Variant::S2S, &corpus, None, &DataOptions::new(TargetVocabulary::default())).unwrap();
    (corpus, data)
}
