//! Frozen transformer encoder with trainable per-layer prefixes.
//!
//! Prefix rows are injected as extra keys and values in every attention layer (the usual
//! past-key-value construction); queries come from the real tokens only. The sentence
//! embedding is the mean of the final hidden states over token positions.

mod base;
mod prefix;
mod tokenizer;

use ndarray::Array1;
use thiserror::Error;

pub use base::{BaseEncoder, EncoderConfig, ForwardCache, LayerWeights, PrefixGrad, DEFAULT_BASE_MODEL};
pub use prefix::{load_prefix, save_prefix, LayerPrefix, PrefixModule, PrefixParameters, PrefixReparam};
pub use tokenizer::{HashTokenizer, Tokenized, BOS_ID, EOS_ID};

pub const DEFAULT_NUM_VIRTUAL_TOKENS: usize = 20;
pub const DEFAULT_MAX_SEQ_LEN: usize = 512;
pub const PREFIX_INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("prefix built for base model {found:?} cannot be used with {expected:?}")]
    IncompatibleBaseModel { expected: String, found: String },
    #[error("corrupt artifact: {0}")]
    CorruptArtifact(String),
    #[error("unknown base model {0:?} (not a built-in id or an existing weight file)")]
    UnknownBaseModel(String),
    #[error("invalid encoder configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Pooled sentence embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub embedding: Array1<f64>,
}

/// Encodes each text with the prefix injected. Inputs longer than `max_seq_len` are truncated
/// and counted in [`BaseEncoder::truncation_count`].
pub fn encode<S: AsRef<str>>(
    base: &BaseEncoder,
    texts: &[S],
    prefix: &PrefixParameters,
) -> Result<Vec<EncoderOutput>, EncoderError> {
    base.check_prefix(prefix)?;
    Ok(texts
        .iter()
        .map(|t| base.encode_text(t.as_ref(), Some(prefix)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy() -> BaseEncoder {
        BaseEncoder::random(
            "toy",
            EncoderConfig {
                vocab_buckets: 64,
                hidden: 8,
                layers: 2,
                heads: 2,
                ffn: 16,
                max_seq_len: 32,
            },
            11,
        )
        .unwrap()
    }

    /// Forces the first query coordinate of every head to 1 so a strongly negative key
    /// prefix in that coordinate gets vanishing attention.
    fn with_constant_query_coordinate(mut enc: BaseEncoder) -> BaseEncoder {
        let dh = enc.config().head_dim();
        let heads = enc.config().heads;
        for layer in enc.layers_mut() {
            for hd in 0..heads {
                let c = hd * dh;
                layer.wq.column_mut(c).fill(0.0);
                layer.bq[c] = 1.0;
            }
        }
        enc
    }

    fn inert_prefix(enc: &BaseEncoder, n: usize) -> PrefixParameters {
        let mut p = PrefixParameters::zeros(enc, n);
        let dh = enc.config().head_dim();
        for l in &mut p.layers {
            for hd in 0..enc.config().heads {
                l.key.column_mut(hd * dh).fill(-1000.0);
            }
        }
        p
    }

    #[test]
    fn output_shape() {
        let enc = BaseEncoder::load(DEFAULT_BASE_MODEL).unwrap();
        let prefix = PrefixParameters::random(&enc, DEFAULT_NUM_VIRTUAL_TOKENS, PREFIX_INIT_STD, 1);
        let out = encode(&enc, &["first text", "a second one", ""], &prefix).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|o| o.embedding.len() == enc.embedding_dim()));
        assert!(out.iter().all(|o| o.embedding.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn negligible_prefix_matches_prefix_free_pass() {
        let enc = with_constant_query_coordinate(toy());
        let prefix = inert_prefix(&enc, 20);
        for text in ["alpha beta gamma", "a much longer piece of text with many words", ""] {
            let with = enc.encode_text(text, Some(&prefix)).embedding;
            let without = enc.encode_text(text, None).embedding;
            let diff = (&with - &without).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
            assert!(diff < 1e-5, "{text}: {diff}");
        }
    }

    #[test]
    fn pooling_ignores_prefix_count_for_identical_tokens() {
        let mut enc = with_constant_query_coordinate(toy());
        let row = enc.token_embedding.row(5).to_owned();
        for mut r in enc.token_embedding.rows_mut() {
            r.assign(&row);
        }
        enc.position_embedding.fill(0.0);
        let reference = enc.encode_text("w w w w", Some(&inert_prefix(&enc, 1))).embedding;
        for n in [5, 20] {
            let e = enc.encode_text("w w w w", Some(&inert_prefix(&enc, n))).embedding;
            assert!((&e - &reference).mapv(f64::abs).sum() < 1e-9);
        }
    }

    #[test]
    fn incompatible_prefix_rejected() {
        let enc = toy();
        let other = BaseEncoder::load(DEFAULT_BASE_MODEL).unwrap();
        let prefix = PrefixParameters::zeros(&other, 3);
        assert!(matches!(
            encode(&enc, &["x"], &prefix),
            Err(EncoderError::IncompatibleBaseModel { .. })
        ));
    }

    fn scalar_loss(enc: &BaseEncoder, ids: &[usize], prefix: &PrefixParameters, w: &Array1<f64>) -> f64 {
        enc.forward(ids, Some(prefix)).0.dot(w)
    }

    #[test]
    fn prefix_gradient_matches_finite_differences() {
        let enc = toy();
        let prefix = PrefixParameters::random(&enc, 3, 0.5, 2);
        let ids = enc.tokenize("one two three four");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = Array1::from_shape_fn(8, |_| rng.random_range(-1.0..1.0));
        let (_, cache) = enc.forward(&ids, Some(&prefix));
        let grad = enc.backward(&cache, &w);
        let h = 1e-5;
        for l in 0..2 {
            for (is_key, g) in [(true, &grad[l].key), (false, &grad[l].value)] {
                for i in 0..3 {
                    for j in 0..8 {
                        let bump = |delta: f64| {
                            let mut p = prefix.clone();
                            let m: &mut Array2<f64> = if is_key { &mut p.layers[l].key } else { &mut p.layers[l].value };
                            m[[i, j]] += delta;
                            scalar_loss(&enc, &ids, &p, &w)
                        };
                        let fd = (bump(h) - bump(-h)) / (2.0 * h);
                        let an = g[[i, j]];
                        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                        assert!(rel < 1e-4, "layer {l} key={is_key} [{i},{j}] fd={fd} an={an}");
                    }
                }
            }
        }
    }

    #[test]
    fn reparam_gradient_matches_finite_differences() {
        use crate::nn::ParamSet;
        let enc = toy();
        let reparam = PrefixReparam::new(&enc, 3, 6, 0.3, 8);
        let ids = enc.tokenize("quick brown fox");
        let w = Array1::from_shape_fn(8, |i| (i as f64 * 0.37).sin());
        let loss = |r: &PrefixReparam| scalar_loss(&enc, &ids, &r.flatten(), &w);
        let (_, cache) = enc.forward(&ids, Some(&reparam.flatten()));
        let g = reparam.backward(&enc.backward(&cache, &w));
        let mut analytic = Vec::new();
        g.visit(&mut |_, s| analytic.extend_from_slice(s));
        let n = reparam.num_params();
        let h = 1e-5;
        for idx in (0..n).step_by(7) {
            let bump = |delta: f64| {
                let mut r = reparam.clone();
                let mut k = 0;
                r.visit_mut(&mut |_, s| {
                    if idx >= k && idx < k + s.len() {
                        s[idx - k] += delta;
                    }
                    k += s.len();
                });
                loss(&r)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let an = analytic[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-4, "param {idx}: fd={fd} an={an}");
        }
    }

    #[test]
    fn prefix_artifact_round_trip_and_errors() {
        let enc = toy();
        let prefix = PrefixParameters::random(&enc, 4, PREFIX_INIT_STD, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prefix.bin");
        save_prefix(&prefix, &path).unwrap();
        let back = load_prefix(&path, &enc).unwrap();
        assert_eq!(back, prefix);
        for (a, b) in back.layers.iter().zip(&prefix.layers) {
            assert!(a.key.iter().zip(b.key.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        let other = BaseEncoder::load(DEFAULT_BASE_MODEL).unwrap();
        assert!(matches!(
            load_prefix(&path, &other),
            Err(EncoderError::IncompatibleBaseModel { .. })
        ));

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_prefix(&path, &enc), Err(EncoderError::CorruptArtifact(_))));
    }
}
