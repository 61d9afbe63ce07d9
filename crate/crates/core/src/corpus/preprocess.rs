use std::collections::HashSet;
use std::sync::OnceLock;

const DEFAULT_STOPWORDS: &str = include_str!("../../data/stopwords_en.txt");

/// A set of tokens removed during preprocessing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stopwords(HashSet<String>);

impl Stopwords {
    /// The shipped English list.
    pub fn english() -> &'static Stopwords {
        static LIST: OnceLock<Stopwords> = OnceLock::new();
        LIST.get_or_init(|| Stopwords::parse(DEFAULT_STOPWORDS))
    }

    /// Parses one token per line; blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Self {
        let set = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        Stopwords(set)
    }

    pub fn empty() -> Self {
        Stopwords(HashSet::new())
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(token)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct PreprocessOptions {
    /// Tokens with fewer characters than this are dropped.
    pub min_token_len: usize,
    pub stopwords: Stopwords,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            min_token_len: 3,
            stopwords: Stopwords::english().clone(),
        }
    }
}

/// Lowercases, replaces every non-alphanumeric character with a space, splits on
/// whitespace, then drops stopwords and short tokens.
pub fn preprocess(raw_text: &str, options: &PreprocessOptions) -> Vec<String> {
    let cleaned: String = raw_text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    cleaned
        .split_whitespace()
        .filter(|t| t.chars().count() >= options.min_token_len)
        .filter(|t| !options.stopwords.contains(t))
        .map(str::to_owned)
        .collect()
}
