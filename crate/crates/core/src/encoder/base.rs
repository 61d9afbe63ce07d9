use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::prefix::{LayerPrefix, PrefixParameters};
use super::tokenizer::HashTokenizer;
use super::{EncoderError, EncoderOutput};
use crate::nn::{self, gelu, gelu_grad, layer_norm, layer_norm_backward, LayerNormCache};
use crate::tensorfile::TensorFile;

/// Architecture of the frozen base transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_buckets: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_seq_len: usize,
}

impl EncoderConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    fn validate(&self) -> Result<(), EncoderError> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(EncoderError::InvalidConfig(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.layers == 0 || self.ffn == 0 || self.vocab_buckets < 3 || self.max_seq_len < 2 {
            return Err(EncoderError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Built-in base models: `(id, config, weight seed)`.
const REGISTRY: &[(&str, EncoderConfig, u64)] = &[
    (
        "hashformer-mini",
        EncoderConfig {
            vocab_buckets: 4096,
            hidden: 32,
            layers: 2,
            heads: 4,
            ffn: 64,
            max_seq_len: 512,
        },
        0x5EED_0001,
    ),
    (
        "hashformer-small",
        EncoderConfig {
            vocab_buckets: 8192,
            hidden: 64,
            layers: 4,
            heads: 4,
            ffn: 128,
            max_seq_len: 512,
        },
        0x5EED_0002,
    ),
];

pub const DEFAULT_BASE_MODEL: &str = "hashformer-mini";

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
}

/// Frozen post-LN transformer encoder over hashed word ids.
///
/// Nothing in this crate mutates an encoder after construction; prefix tuning only feeds
/// extra key/value rows into each attention layer.
#[derive(Debug)]
pub struct BaseEncoder {
    id: String,
    config: EncoderConfig,
    tokenizer: HashTokenizer,
    pub(crate) token_embedding: Array2<f64>,
    pub(crate) position_embedding: Array2<f64>,
    pub(crate) ln0_gamma: Array1<f64>,
    pub(crate) ln0_beta: Array1<f64>,
    pub(crate) layers: Vec<LayerWeights>,
    truncations: AtomicUsize,
}

impl Clone for BaseEncoder {
    fn clone(&self) -> Self {
        BaseEncoder {
            id: self.id.clone(),
            config: self.config.clone(),
            tokenizer: self.tokenizer.clone(),
            token_embedding: self.token_embedding.clone(),
            position_embedding: self.position_embedding.clone(),
            ln0_gamma: self.ln0_gamma.clone(),
            ln0_beta: self.ln0_beta.clone(),
            layers: self.layers.clone(),
            truncations: AtomicUsize::new(self.truncations.load(Ordering::Relaxed)),
        }
    }
}

struct LayerCache {
    x: Array2<f64>,
    q: Array2<f64>,
    keys: Array2<f64>,
    values: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ln1: LayerNormCache,
    pre_act: Array2<f64>,
    ln2: LayerNormCache,
}

/// Activations of one forward pass, consumed by [`BaseEncoder::backward`].
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    num_prefix: usize,
    seq_len: usize,
}

/// Gradient of a scalar w.r.t. every prefix key/value entry.
pub type PrefixGrad = Vec<LayerPrefix>;

impl BaseEncoder {
    /// Randomly initialized weights drawn from `seed`; used for the built-in models and tests.
    pub fn random(id: impl Into<String>, config: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let attn_std = 1.0 / (h as f64).sqrt();
        let token_embedding = nn::normal_matrix(&mut rng, config.vocab_buckets, h, 1.0);
        let position_embedding = nn::normal_matrix(&mut rng, config.max_seq_len, h, 0.1);
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                wq: nn::normal_matrix(&mut rng, h, h, attn_std),
                bq: Array1::zeros(h),
                wk: nn::normal_matrix(&mut rng, h, h, attn_std),
                bk: Array1::zeros(h),
                wv: nn::normal_matrix(&mut rng, h, h, attn_std),
                bv: Array1::zeros(h),
                wo: nn::normal_matrix(&mut rng, h, h, attn_std),
                bo: Array1::zeros(h),
                ln1_gamma: Array1::ones(h),
                ln1_beta: Array1::zeros(h),
                w1: nn::normal_matrix(&mut rng, h, config.ffn, attn_std),
                b1: Array1::zeros(config.ffn),
                w2: nn::normal_matrix(&mut rng, config.ffn, h, 1.0 / (config.ffn as f64).sqrt()),
                b2: Array1::zeros(h),
                ln2_gamma: Array1::ones(h),
                ln2_beta: Array1::zeros(h),
            })
            .collect();
        Ok(BaseEncoder {
            id: id.into(),
            tokenizer: HashTokenizer::new(config.vocab_buckets, config.max_seq_len),
            config,
            token_embedding,
            position_embedding,
            ln0_gamma: Array1::ones(h),
            ln0_beta: Array1::zeros(h),
            layers,
            truncations: AtomicUsize::new(0),
        })
    }

    /// Resolves a built-in model id, or loads a weight file when `name` is a path.
    pub fn load(name: &str) -> Result<Self, EncoderError> {
        if let Some((id, config, seed)) = REGISTRY.iter().find(|(id, _, _)| *id == name) {
            return Self::random(*id, config.clone(), *seed);
        }
        let path = Path::new(name);
        if path.exists() {
            return Self::load_weights(path);
        }
        Err(EncoderError::UnknownBaseModel(name.to_owned()))
    }

    /// Same as [`BaseEncoder::load`] with `max_seq_len` lowered (never raised) to `max_seq_len`.
    pub fn load_with_max_len(name: &str, max_seq_len: usize) -> Result<Self, EncoderError> {
        let mut enc = Self::load(name)?;
        if max_seq_len < 2 {
            return Err(EncoderError::InvalidConfig("max_seq_len must be at least 2".into()));
        }
        if max_seq_len < enc.config.max_seq_len {
            enc.config.max_seq_len = max_seq_len;
            enc.tokenizer = HashTokenizer::new(enc.config.vocab_buckets, max_seq_len);
        }
        Ok(enc)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.hidden
    }

    pub fn tokenizer(&self) -> &HashTokenizer {
        &self.tokenizer
    }

    /// Number of inputs truncated to `max_seq_len` so far.
    pub fn truncation_count(&self) -> usize {
        self.truncations.load(Ordering::Relaxed)
    }

    pub fn layers_mut(&mut self) -> &mut [LayerWeights] {
        &mut self.layers
    }

    fn all_tensors(&self) -> Vec<(String, ndarray::ArrayViewD<'_, f64>)> {
        let mut out = vec![
            ("token_embedding".to_string(), self.token_embedding.view().into_dyn()),
            ("position_embedding".to_string(), self.position_embedding.view().into_dyn()),
            ("ln0.gamma".to_string(), self.ln0_gamma.view().into_dyn()),
            ("ln0.beta".to_string(), self.ln0_beta.view().into_dyn()),
        ];
        for (l, w) in self.layers.iter().enumerate() {
            let named: [(&str, ndarray::ArrayViewD<'_, f64>); 16] = [
                ("wq", w.wq.view().into_dyn()),
                ("bq", w.bq.view().into_dyn()),
                ("wk", w.wk.view().into_dyn()),
                ("bk", w.bk.view().into_dyn()),
                ("wv", w.wv.view().into_dyn()),
                ("bv", w.bv.view().into_dyn()),
                ("wo", w.wo.view().into_dyn()),
                ("bo", w.bo.view().into_dyn()),
                ("ln1.gamma", w.ln1_gamma.view().into_dyn()),
                ("ln1.beta", w.ln1_beta.view().into_dyn()),
                ("w1", w.w1.view().into_dyn()),
                ("b1", w.b1.view().into_dyn()),
                ("w2", w.w2.view().into_dyn()),
                ("b2", w.b2.view().into_dyn()),
                ("ln2.gamma", w.ln2_gamma.view().into_dyn()),
                ("ln2.beta", w.ln2_beta.view().into_dyn()),
            ];
            for (n, v) in named {
                out.push((format!("layer.{l}.{n}"), v));
            }
        }
        out
    }

    /// SHA-256 over every weight, in a fixed order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.id.as_bytes());
        for (name, t) in self.all_tensors() {
            h.update(name.as_bytes());
            for v in t.iter() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn save_weights(&self, path: &Path) -> Result<(), EncoderError> {
        let mut tf = TensorFile::new(serde_json::json!({
            "kind": "base_encoder",
            "id": self.id,
            "config": self.config,
        }));
        for (name, t) in self.all_tensors() {
            tf.tensors.push((name, t.to_owned()));
        }
        tf.save(path)?;
        Ok(())
    }

    pub fn load_weights(path: &Path) -> Result<Self, EncoderError> {
        let tf = TensorFile::load(path)?;
        if tf.meta.get("kind").and_then(|k| k.as_str()) != Some("base_encoder") {
            return Err(EncoderError::CorruptArtifact("not a base encoder file".into()));
        }
        let id = tf.meta["id"]
            .as_str()
            .ok_or_else(|| EncoderError::CorruptArtifact("missing id".into()))?
            .to_owned();
        let config: EncoderConfig = serde_json::from_value(tf.meta["config"].clone())
            .map_err(|e| EncoderError::CorruptArtifact(e.to_string()))?;
        config.validate()?;
        let mut enc = Self::random(id, config.clone(), 0)?;
        enc.token_embedding = tf.get2("token_embedding")?;
        enc.position_embedding = tf.get2("position_embedding")?;
        enc.ln0_gamma = tf.get1("ln0.gamma")?;
        enc.ln0_beta = tf.get1("ln0.beta")?;
        for (l, w) in enc.layers.iter_mut().enumerate() {
            let m = |n: &str| tf.get2(&format!("layer.{l}.{n}"));
            let v = |n: &str| tf.get1(&format!("layer.{l}.{n}"));
            *w = LayerWeights {
                wq: m("wq")?,
                bq: v("bq")?,
                wk: m("wk")?,
                bk: v("bk")?,
                wv: m("wv")?,
                bv: v("bv")?,
                wo: m("wo")?,
                bo: v("bo")?,
                ln1_gamma: v("ln1.gamma")?,
                ln1_beta: v("ln1.beta")?,
                w1: m("w1")?,
                b1: v("b1")?,
                w2: m("w2")?,
                b2: v("b2")?,
                ln2_gamma: v("ln2.gamma")?,
                ln2_beta: v("ln2.beta")?,
            };
        }
        if enc.token_embedding.dim() != (config.vocab_buckets, config.hidden)
            || enc.position_embedding.dim() != (config.max_seq_len, config.hidden)
        {
            return Err(EncoderError::CorruptArtifact("embedding shape mismatch".into()));
        }
        Ok(enc)
    }

    /// Checks that `prefix` was built for this base model's geometry.
    pub fn check_prefix(&self, prefix: &PrefixParameters) -> Result<(), EncoderError> {
        if prefix.base_model != self.id {
            return Err(EncoderError::IncompatibleBaseModel {
                expected: self.id.clone(),
                found: prefix.base_model.clone(),
            });
        }
        let shape_ok = prefix.layers.len() == self.config.layers
            && prefix.layers.iter().all(|l| {
                l.key.dim() == (prefix.num_virtual_tokens, self.config.hidden)
                    && l.value.dim() == (prefix.num_virtual_tokens, self.config.hidden)
            });
        if !shape_ok {
            return Err(EncoderError::IncompatibleBaseModel {
                expected: format!("{} ({} layers x {} hidden)", self.id, self.config.layers, self.config.hidden),
                found: format!("prefix with {} layers", prefix.layers.len()),
            });
        }
        Ok(())
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let t = self.tokenizer.tokenize(text);
        if t.truncated {
            self.truncations.fetch_add(1, Ordering::Relaxed);
            log::warn!("input truncated to {} tokens", self.config.max_seq_len);
        }
        t.ids
    }

    /// Mean-pooled embedding of `text` with prefix rows injected into every layer's keys and values.
    pub fn encode_text(&self, text: &str, prefix: Option<&PrefixParameters>) -> EncoderOutput {
        let ids = self.tokenize(text);
        EncoderOutput {
            embedding: self.forward(&ids, prefix).0,
        }
    }

    /// Forward pass over token ids. Returns the pooled embedding and the activation cache.
    ///
    /// The prefix (if any) must already be validated with [`BaseEncoder::check_prefix`].
    pub fn forward(&self, ids: &[usize], prefix: Option<&PrefixParameters>) -> (Array1<f64>, ForwardCache) {
        let t = ids.len();
        let h = self.config.hidden;
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let num_prefix = prefix.map_or(0, |p| p.num_virtual_tokens);

        let mut x0 = Array2::zeros((t, h));
        for (pos, &id) in ids.iter().enumerate() {
            let mut row = x0.row_mut(pos);
            row += &self.token_embedding.row(id);
            row += &self.position_embedding.row(pos);
        }
        let (mut x, _) = layer_norm(&x0, self.ln0_gamma.view(), self.ln0_beta.view());

        let mut caches = Vec::with_capacity(self.layers.len());
        for (l, w) in self.layers.iter().enumerate() {
            let q = nn::affine(&x, &w.wq, &w.bq);
            let k_tok = nn::affine(&x, &w.wk, &w.bk);
            let v_tok = nn::affine(&x, &w.wv, &w.bv);
            let (keys, values) = match prefix {
                Some(p) => (
                    ndarray::concatenate(Axis(0), &[p.layers[l].key.view(), k_tok.view()]).unwrap(),
                    ndarray::concatenate(Axis(0), &[p.layers[l].value.view(), v_tok.view()]).unwrap(),
                ),
                None => (k_tok, v_tok),
            };
            let mut attn = Array2::zeros((t, h));
            let mut probs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let cols = s![.., hd * dh..(hd + 1) * dh];
                let scores = q.slice(cols).dot(&keys.slice(cols).t()) * scale;
                let p = nn::softmax_rows(&scores);
                attn.slice_mut(cols).assign(&p.dot(&values.slice(cols)));
                probs.push(p);
            }
            let r1 = &x + &nn::affine(&attn, &w.wo, &w.bo);
            let (y1, ln1) = layer_norm(&r1, w.ln1_gamma.view(), w.ln1_beta.view());
            let pre_act = nn::affine(&y1, &w.w1, &w.b1);
            let ff = nn::affine(&pre_act.mapv(gelu), &w.w2, &w.b2);
            let r2 = &y1 + &ff;
            let (y2, ln2) = layer_norm(&r2, w.ln2_gamma.view(), w.ln2_beta.view());
            caches.push(LayerCache {
                x,
                q,
                keys,
                values,
                probs,
                ln1,
                pre_act,
                ln2,
            });
            x = y2;
        }
        let pooled = x.mean_axis(Axis(0)).expect("sequence has BOS/EOS");
        (
            pooled,
            ForwardCache {
                layers: caches,
                num_prefix,
                seq_len: t,
            },
        )
    }

    /// Backpropagates `d_pooled` to the prefix key/value rows. Base weights get no gradient.
    pub fn backward(&self, cache: &ForwardCache, d_pooled: &Array1<f64>) -> PrefixGrad {
        let t = cache.seq_len;
        let np = cache.num_prefix;
        let heads = self.config.heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut dy = Array2::from_shape_fn((t, self.config.hidden), |(_, j)| d_pooled[j] / t as f64);
        let mut grads: Vec<LayerPrefix> = Vec::with_capacity(self.layers.len());
        for (w, c) in self.layers.iter().zip(&cache.layers).rev() {
            let dr2 = layer_norm_backward(&dy, w.ln2_gamma.view(), &c.ln2);
            let dg = dr2.dot(&w.w2.t());
            let du = &dg * &c.pre_act.mapv(gelu_grad);
            let dy1 = &dr2 + &du.dot(&w.w1.t());
            let dr1 = layer_norm_backward(&dy1, w.ln1_gamma.view(), &c.ln1);
            let d_attn = dr1.dot(&w.wo.t());

            let mut dq = Array2::zeros(c.q.raw_dim());
            let mut dkeys = Array2::zeros(c.keys.raw_dim());
            let mut dvalues = Array2::zeros(c.values.raw_dim());
            for hd in 0..heads {
                let cols = s![.., hd * dh..(hd + 1) * dh];
                let p = &c.probs[hd];
                let d_out = d_attn.slice(cols);
                let dp = d_out.dot(&c.values.slice(cols).t());
                dvalues.slice_mut(cols).assign(&p.t().dot(&d_out));
                let ds = nn::softmax_rows_backward(p, &dp) * scale;
                dq.slice_mut(cols).assign(&ds.dot(&c.keys.slice(cols)));
                dkeys.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
            }
            let dk_tok = dkeys.slice(s![np.., ..]);
            let dv_tok = dvalues.slice(s![np.., ..]);
            let dx = &dr1 + &dq.dot(&w.wq.t()) + &dk_tok.dot(&w.wk.t()) + &dv_tok.dot(&w.wv.t());
            grads.push(LayerPrefix {
                key: dkeys.slice(s![..np, ..]).to_owned(),
                value: dvalues.slice(s![..np, ..]).to_owned(),
            });
            debug_assert_eq!(dx.dim(), c.x.dim());
            dy = dx;
        }
        grads.reverse();
        grads
    }

    /// Attention weights of every layer/head over `[prefix | tokens]` for inspection.
    pub fn attention_weights(&self, text: &str, prefix: Option<&PrefixParameters>) -> Vec<Vec<Array2<f64>>> {
        let ids = self.tokenizer.tokenize(text).ids;
        let (_, cache) = self.forward(&ids, prefix);
        cache.layers.into_iter().map(|l| l.probs).collect()
    }
}
