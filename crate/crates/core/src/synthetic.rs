//! Synthetic corpora with known topic structure.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::corpus::RawRecord;

const SYNTHETIC_NEWS: &str = include_str!("../data/synthetic_news.json");

/// Documents drawn from `num_topics` disjoint word lists; each document uses a single topic.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantedConfig {
    pub num_topics: usize,
    pub words_per_topic: usize,
    pub num_docs: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            num_topics: 3,
            words_per_topic: 20,
            num_docs: 200,
            min_len: 20,
            max_len: 30,
            seed: 0,
        }
    }
}

pub fn planted_word(topic: usize, index: usize) -> String {
    format!("k{topic}w{index:02}")
}

/// Topic of document `i` is `i % num_topics`; labels are `topic<k>`.
pub fn planted_corpus(config: &PlantedConfig) -> Vec<RawRecord> {
    assert!(config.num_topics >= 1 && config.words_per_topic >= 1 && config.min_len <= config.max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    (0..config.num_docs)
        .map(|i| {
            let topic = i % config.num_topics;
            let len = rng.random_range(config.min_len..=config.max_len);
            let words: Vec<String> = (0..len)
                .map(|_| planted_word(topic, rng.random_range(0..config.words_per_topic)))
                .collect();
            RawRecord {
                id: i.to_string(),
                label: Some(format!("topic{topic}")),
                text: words.join(" "),
            }
        })
        .collect()
}

#[derive(Deserialize)]
struct NewsData {
    topics: BTreeMap<String, Vec<String>>,
}

/// Topic name → word list of the bundled synthetic news data.
pub fn news_topics() -> &'static BTreeMap<String, Vec<String>> {
    static TOPICS: OnceLock<BTreeMap<String, Vec<String>>> = OnceLock::new();
    TOPICS.get_or_init(|| {
        serde_json::from_str::<NewsData>(SYNTHETIC_NEWS)
            .expect("bundled news data parses")
            .topics
    })
}

const FILLERS: &[&str] = &["the", "of", "in", "on", "for", "and", "after", "over"];

/// Headline-like short texts: 3 to 5 distinct words of one news topic with a couple of
/// stopword fillers. Labelled with the topic name.
pub fn news_headlines(num_docs: usize, seed: u64) -> Vec<RawRecord> {
    let topics: Vec<(&String, &Vec<String>)> = news_topics().iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_docs)
        .map(|i| {
            let (name, words) = topics[i % topics.len()];
            let n = rng.random_range(3..=5);
            let mut picked: Vec<&str> = words.choose_multiple(&mut rng, n).map(String::as_str).collect();
            for _ in 0..2 {
                let at = rng.random_range(1..picked.len());
                picked.insert(at, FILLERS.choose(&mut rng).expect("non-empty"));
            }
            let mut text = picked.join(" ");
            if let Some(first) = text.get(..1) {
                text = first.to_uppercase() + &text[1..];
            }
            RawRecord {
                id: i.to_string(),
                label: Some(name.clone()),
                text,
            }
        })
        .collect()
}

/// Shuffles records in place with a seeded generator.
pub fn shuffle_records(records: &mut [RawRecord], seed: u64) {
    records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
}
