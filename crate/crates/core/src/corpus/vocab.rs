use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{CorpusError, Document};

/// Dense bijection between tokens and ids in `[0, V)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    id_to_token: Vec<String>,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        Vocabulary::from_tokens(r.id_to_token)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            id_to_token: v.id_to_token,
        }
    }
}

impl Vocabulary {
    /// Builds a vocabulary assigning ids in the given order. Duplicates keep their first id.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut token_to_id = HashMap::new();
        let mut id_to_token = Vec::new();
        for t in tokens {
            let t = t.into();
            if !token_to_id.contains_key(&t) {
                token_to_id.insert(t.clone(), id_to_token.len());
                id_to_token.push(t);
            }
        }
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Tokens of `self` that also occur somewhere in `docs`, keeping the original relative order.
    pub fn intersect_with<'a, I>(&self, docs: I) -> Vocabulary
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let seen: HashSet<&str> = docs
            .into_iter()
            .flat_map(|d| d.iter().map(String::as_str))
            .filter(|t| self.contains(t))
            .collect();
        Vocabulary::from_tokens(
            self.id_to_token
                .iter()
                .filter(|t| seen.contains(t.as_str()))
                .cloned(),
        )
    }
}

/// Keeps tokens whose document frequency lies in `[min_df, max_df_fraction * |docs|]`.
///
/// Ids are assigned by descending document frequency, ties broken by the token itself.
pub fn build_vocabulary(
    docs: &[Document],
    min_df: usize,
    max_df_fraction: f64,
) -> Result<Vocabulary, CorpusError> {
    let token_lists: Vec<&[String]> = docs.iter().map(|d| d.tokens.as_slice()).collect();
    build_vocabulary_from_tokens(&token_lists, min_df, max_df_fraction)
}

pub fn build_vocabulary_from_tokens(
    docs: &[&[String]],
    min_df: usize,
    max_df_fraction: f64,
) -> Result<Vocabulary, CorpusError> {
    if docs.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut df: BTreeMap<&str, usize> = BTreeMap::new();
    for tokens in docs {
        let unique: HashSet<&str> = tokens.iter().map(String::as_str).collect();
        for t in unique {
            *df.entry(t).or_default() += 1;
        }
    }
    let max_df = max_df_fraction * docs.len() as f64;
    let mut kept: Vec<(&str, usize)> = df
        .into_iter()
        .filter(|&(_, n)| n >= min_df && (n as f64) <= max_df)
        .collect();
    if kept.is_empty() {
        return Err(CorpusError::EmptyVocabulary);
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t)))
}

/// Sparse token counts over a fixed vocabulary. Entries are sorted by id and strictly positive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BowVector {
    dim: usize,
    entries: Vec<(usize, u32)>,
}

impl BowVector {
    pub fn from_entries(dim: usize, mut entries: Vec<(usize, u32)>) -> Self {
        entries.retain(|&(_, c)| c > 0);
        entries.sort_unstable_by_key(|&(i, _)| i);
        entries.dedup_by(|later, earlier| {
            if later.0 == earlier.0 {
                earlier.1 += later.1;
                true
            } else {
                false
            }
        });
        assert!(entries.iter().all(|&(i, _)| i < dim), "bow id out of range");
        BowVector { dim, entries }
    }

    pub fn zeros(dim: usize) -> Self {
        BowVector {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, u32)] {
        &self.entries
    }

    /// Document length in in-vocabulary tokens.
    pub fn total(&self) -> u64 {
        self.entries.iter().map(|&(_, c)| c as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> u32 {
        self.entries
            .binary_search_by_key(&id, |&(i, _)| i)
            .map(|pos| self.entries[pos].1)
            .unwrap_or(0)
    }

    pub fn to_dense(&self) -> Vec<u32> {
        let mut out = vec![0; self.dim];
        for &(i, c) in &self.entries {
            out[i] = c;
        }
        out
    }
}

pub fn bow_vectorize<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> BowVector {
    let mut counts: BTreeMap<usize, u32> = BTreeMap::new();
    for t in tokens {
        if let Some(id) = vocab.id(t.as_ref()) {
            *counts.entry(id).or_default() += 1;
        }
    }
    BowVector {
        dim: vocab.len(),
        entries: counts.into_iter().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn doc(id: &str, tokens: &[&str]) -> Document {
        Document {
            id: id.into(),
            raw_text: tokens.join(" "),
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            label: None,
        }
    }

    #[test]
    fn min_df_filters_rare_tokens() {
        let docs = vec![doc("0", &["a", "b"]), doc("1", &["a", "c"]), doc("2", &["a"])];
        let v = build_vocabulary(&docs, 2, 1.0).unwrap();
        assert_eq!(v.tokens(), &["a".to_string()]);
    }

    #[test]
    fn single_doc_single_token() {
        let v = build_vocabulary(&[doc("0", &["x"])], 1, 1.0).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v.id("x"), Some(0));
    }

    #[test]
    fn threshold_above_corpus_size_is_empty() {
        let docs = vec![doc("0", &["a"]), doc("1", &["a"]), doc("2", &["a"])];
        assert!(matches!(
            build_vocabulary(&docs, 5, 1.0),
            Err(CorpusError::EmptyVocabulary)
        ));
    }

    #[test]
    fn max_df_drops_ubiquitous_tokens_and_orders_by_df() {
        let docs = vec![
            doc("0", &["common", "beta", "alpha"]),
            doc("1", &["common", "beta", "alpha"]),
            doc("2", &["common", "gamma"]),
            doc("3", &["common", "gamma", "zeta"]),
        ];
        let v = build_vocabulary(&docs, 1, 0.5).unwrap();
        assert_eq!(v.tokens(), &["alpha", "beta", "gamma", "zeta"]);
    }

    #[test]
    fn vectorize_examples() {
        let v = Vocabulary::from_tokens(["a", "b"]);
        assert_eq!(bow_vectorize(&["a", "b", "a"], &v).to_dense(), vec![2, 1]);
        let v = Vocabulary::from_tokens(["a"]);
        assert_eq!(bow_vectorize(&["z"], &v).to_dense(), vec![0]);
        let empty: [&str; 0] = [];
        assert!(bow_vectorize(&empty, &v).to_dense().iter().all(|&c| c == 0));
    }

    #[test]
    fn vocab_serde_keeps_ids() {
        let v = Vocabulary::from_tokens(["q", "a", "m"]);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("m"), Some(2));
    }

    proptest! {
        #[test]
        fn bow_total_counts_in_vocab_tokens(tokens in proptest::collection::vec("[a-e]", 0..40)) {
            let vocab = Vocabulary::from_tokens(["a", "b", "c"]);
            let bow = bow_vectorize(&tokens, &vocab);
            let in_vocab = tokens.iter().filter(|t| vocab.contains(t)).count() as u64;
            prop_assert_eq!(bow.total(), in_vocab);
        }

        #[test]
        fn vocabulary_is_deterministic(docs in proptest::collection::vec(
            proptest::collection::vec("[a-f]{1,2}", 1..6), 1..12)) {
            let refs: Vec<&[String]> = docs.iter().map(Vec::as_slice).collect();
            let a = build_vocabulary_from_tokens(&refs, 1, 1.0).unwrap();
            let b = build_vocabulary_from_tokens(&refs, 1, 1.0).unwrap();
            prop_assert_eq!(a.tokens(), b.tokens());
            for (i, t) in a.tokens().iter().enumerate() {
                prop_assert_eq!(a.id(t), Some(i));
            }
        }
    }
}
