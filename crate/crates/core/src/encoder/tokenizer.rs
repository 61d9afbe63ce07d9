use std::hash::Hasher;

use fnv::FnvHasher;

pub const BOS_ID: usize = 0;
pub const EOS_ID: usize = 1;
const RESERVED: usize = 2;

/// Word-level tokenizer hashing each lowercased alphanumeric word into a fixed number of
/// embedding buckets. Sequences are wrapped in BOS/EOS markers, so the empty string still
/// yields a two-token sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashTokenizer {
    buckets: usize,
    max_seq_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<usize>,
    pub truncated: bool,
}

impl HashTokenizer {
    pub fn new(buckets: usize, max_seq_len: usize) -> Self {
        assert!(buckets > RESERVED, "need at least one word bucket");
        assert!(max_seq_len >= 2, "max_seq_len must fit BOS and EOS");
        HashTokenizer { buckets, max_seq_len }
    }

    pub fn word_id(&self, word: &str) -> usize {
        let mut h = FnvHasher::default();
        h.write(word.as_bytes());
        RESERVED + (h.finish() % (self.buckets - RESERVED) as u64) as usize
    }

    pub fn tokenize(&self, text: &str) -> Tokenized {
        let lowered = text.to_lowercase();
        let words = lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty());
        let budget = self.max_seq_len - 2;
        let mut ids = vec![BOS_ID];
        let mut truncated = false;
        for w in words {
            if ids.len() - 1 == budget {
                truncated = true;
                break;
            }
            ids.push(self.word_id(w));
        }
        ids.push(EOS_ID);
        Tokenized { ids, truncated }
    }
}
