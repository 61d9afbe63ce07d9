use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::base::{BaseEncoder, PrefixGrad};
use super::EncoderError;
use crate::nn::{self, slice_of, slice_of_mut, ParamSet};
use crate::tensorfile::{TensorFile, TensorFileError};

/// Key and value rows injected in front of one layer's token keys/values.
/// Both are `num_virtual_tokens x hidden`, heads laid out side by side.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPrefix {
    pub key: Array2<f64>,
    pub value: Array2<f64>,
}

/// Flattened prefix state: the only trainable part of the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixParameters {
    pub base_model: String,
    pub num_virtual_tokens: usize,
    pub layers: Vec<LayerPrefix>,
}

impl PrefixParameters {
    pub fn zeros(base: &BaseEncoder, num_virtual_tokens: usize) -> Self {
        let c = base.config();
        PrefixParameters {
            base_model: base.id().to_owned(),
            num_virtual_tokens,
            layers: (0..c.layers)
                .map(|_| LayerPrefix {
                    key: Array2::zeros((num_virtual_tokens, c.hidden)),
                    value: Array2::zeros((num_virtual_tokens, c.hidden)),
                })
                .collect(),
        }
    }

    /// Gaussian initialization with the given standard deviation.
    pub fn random(base: &BaseEncoder, num_virtual_tokens: usize, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = base.config().hidden;
        PrefixParameters {
            base_model: base.id().to_owned(),
            num_virtual_tokens,
            layers: (0..base.config().layers)
                .map(|_| LayerPrefix {
                    key: nn::normal_matrix(&mut rng, num_virtual_tokens, h, std),
                    value: nn::normal_matrix(&mut rng, num_virtual_tokens, h, std),
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        PrefixParameters {
            base_model: self.base_model.clone(),
            num_virtual_tokens: self.num_virtual_tokens,
            layers: self
                .layers
                .iter()
                .map(|l| LayerPrefix {
                    key: Array2::zeros(l.key.raw_dim()),
                    value: Array2::zeros(l.value.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add_grad(&mut self, grad: &PrefixGrad) {
        for (l, g) in self.layers.iter_mut().zip(grad) {
            l.key += &g.key;
            l.value += &g.value;
        }
    }

    pub(crate) fn to_tensor_file(&self) -> TensorFile {
        let mut tf = TensorFile::new(serde_json::json!({
            "kind": "prefix",
            "base_model": self.base_model,
            "num_virtual_tokens": self.num_virtual_tokens,
            "num_layers": self.layers.len(),
        }));
        for (i, l) in self.layers.iter().enumerate() {
            tf.push(format!("layer.{i}.key"), &l.key);
            tf.push(format!("layer.{i}.value"), &l.value);
        }
        tf
    }

    pub(crate) fn from_tensor_file(tf: &TensorFile) -> Result<Self, EncoderError> {
        let corrupt = |m: &str| EncoderError::CorruptArtifact(m.to_owned());
        if tf.meta.get("kind").and_then(|k| k.as_str()) != Some("prefix") {
            return Err(corrupt("not a prefix artifact"));
        }
        let base_model = tf.meta["base_model"]
            .as_str()
            .ok_or_else(|| corrupt("missing base_model"))?
            .to_owned();
        let num_virtual_tokens = tf.meta["num_virtual_tokens"]
            .as_u64()
            .ok_or_else(|| corrupt("missing num_virtual_tokens"))? as usize;
        let num_layers = tf.meta["num_layers"].as_u64().ok_or_else(|| corrupt("missing num_layers"))? as usize;
        let mut layers = Vec::with_capacity(num_layers);
        for i in 0..num_layers {
            let key = tf.get2(&format!("layer.{i}.key"))?;
            let value = tf.get2(&format!("layer.{i}.value"))?;
            if key.nrows() != num_virtual_tokens || value.dim() != key.dim() {
                return Err(corrupt("prefix tensor shape disagrees with metadata"));
            }
            layers.push(LayerPrefix { key, value });
        }
        Ok(PrefixParameters {
            base_model,
            num_virtual_tokens,
            layers,
        })
    }

    /// Reads a prefix artifact without checking it against a base model.
    pub fn load_unchecked(path: &Path) -> Result<Self, EncoderError> {
        Self::from_tensor_file(&TensorFile::load(path)?)
    }
}

impl ParamSet for PrefixParameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        for l in &self.layers {
            f("prefix.key", slice_of(&l.key));
            f("prefix.value", slice_of(&l.value));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        for l in &mut self.layers {
            f("prefix.key", slice_of_mut(&mut l.key));
            f("prefix.value", slice_of_mut(&mut l.value));
        }
    }
}

pub fn save_prefix(prefix: &PrefixParameters, path: &Path) -> Result<(), EncoderError> {
    prefix.to_tensor_file().save(path)?;
    Ok(())
}

/// Loads a prefix artifact and checks it against `base`.
pub fn load_prefix(path: &Path, base: &BaseEncoder) -> Result<PrefixParameters, EncoderError> {
    let prefix = PrefixParameters::load_unchecked(path)?;
    base.check_prefix(&prefix)?;
    Ok(prefix)
}

impl From<TensorFileError> for EncoderError {
    fn from(e: TensorFileError) -> Self {
        match e {
            TensorFileError::Io { path, source } => EncoderError::Io { path, source },
            other => EncoderError::CorruptArtifact(other.to_string()),
        }
    }
}

/// Prefix produced by a two-layer bottleneck network from a virtual-token embedding:
/// `P = tanh(E W1 + b1) W2 + b2`, split column-wise into per-layer keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixReparam {
    pub base_model: String,
    pub num_layers: usize,
    pub hidden: usize,
    pub embedding: Array2<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl PrefixReparam {
    pub fn new(base: &BaseEncoder, num_virtual_tokens: usize, bottleneck: usize, init_std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = base.config();
        let out = 2 * c.layers * c.hidden;
        PrefixReparam {
            base_model: base.id().to_owned(),
            num_layers: c.layers,
            hidden: c.hidden,
            embedding: nn::normal_matrix(&mut rng, num_virtual_tokens, c.hidden, init_std),
            w1: nn::uniform_fan_in(&mut rng, c.hidden, bottleneck),
            b1: Array1::zeros(bottleneck),
            w2: nn::uniform_fan_in(&mut rng, bottleneck, out),
            b2: Array1::zeros(out),
        }
    }

    fn hidden_act(&self) -> Array2<f64> {
        nn::affine(&self.embedding, &self.w1, &self.b1).mapv(f64::tanh)
    }

    fn split(&self, flat: &Array2<f64>) -> PrefixParameters {
        let h = self.hidden;
        PrefixParameters {
            base_model: self.base_model.clone(),
            num_virtual_tokens: self.embedding.nrows(),
            layers: (0..self.num_layers)
                .map(|l| LayerPrefix {
                    key: flat.slice(s![.., 2 * l * h..(2 * l + 1) * h]).to_owned(),
                    value: flat.slice(s![.., (2 * l + 1) * h..(2 * l + 2) * h]).to_owned(),
                })
                .collect(),
        }
    }

    pub fn flatten(&self) -> PrefixParameters {
        let flat = nn::affine(&self.hidden_act(), &self.w2, &self.b2);
        self.split(&flat)
    }

    /// Chain rule from per-layer prefix gradients to the network's own parameters.
    pub fn backward(&self, grad: &PrefixGrad) -> PrefixReparam {
        let h = self.hidden;
        let n = self.embedding.nrows();
        let mut d_flat = Array2::zeros((n, 2 * self.num_layers * h));
        for (l, g) in grad.iter().enumerate() {
            d_flat.slice_mut(s![.., 2 * l * h..(2 * l + 1) * h]).assign(&g.key);
            d_flat.slice_mut(s![.., (2 * l + 1) * h..(2 * l + 2) * h]).assign(&g.value);
        }
        let a = self.hidden_act();
        let dw2 = a.t().dot(&d_flat);
        let db2 = d_flat.sum_axis(Axis(0));
        let da = d_flat.dot(&self.w2.t());
        let dpre = &da * &a.mapv(|v| 1.0 - v * v);
        let dw1 = self.embedding.t().dot(&dpre);
        let db1 = dpre.sum_axis(Axis(0));
        let demb = dpre.dot(&self.w1.t());
        PrefixReparam {
            base_model: self.base_model.clone(),
            num_layers: self.num_layers,
            hidden: self.hidden,
            embedding: demb,
            w1: dw1,
            b1: db1,
            w2: dw2,
            b2: db2,
        }
    }
}

impl ParamSet for PrefixReparam {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("prefix_reparam.embedding", slice_of(&self.embedding));
        f("prefix_reparam.w1", slice_of(&self.w1));
        f("prefix_reparam.b1", slice_of(&self.b1));
        f("prefix_reparam.w2", slice_of(&self.w2));
        f("prefix_reparam.b2", slice_of(&self.b2));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("prefix_reparam.embedding", slice_of_mut(&mut self.embedding));
        f("prefix_reparam.w1", slice_of_mut(&mut self.w1));
        f("prefix_reparam.b1", slice_of_mut(&mut self.b1));
        f("prefix_reparam.w2", slice_of_mut(&mut self.w2));
        f("prefix_reparam.b2", slice_of_mut(&mut self.b2));
    }
}

/// Trainable prefix state, either direct or through the bottleneck network.
#[derive(Debug, Clone, PartialEq)]
pub enum PrefixModule {
    Direct(PrefixParameters),
    Reparameterized(PrefixReparam),
}

impl PrefixModule {
    pub fn materialize(&self) -> PrefixParameters {
        match self {
            PrefixModule::Direct(p) => p.clone(),
            PrefixModule::Reparameterized(r) => r.flatten(),
        }
    }

    /// Gradient w.r.t. this module's own parameters, shaped like `self`.
    pub fn backward(&self, grad: &PrefixGrad) -> PrefixModule {
        match self {
            PrefixModule::Direct(p) => {
                let mut g = p.zeros_like();
                g.add_grad(grad);
                PrefixModule::Direct(g)
            }
            PrefixModule::Reparameterized(r) => PrefixModule::Reparameterized(r.backward(grad)),
        }
    }
}

impl ParamSet for PrefixModule {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        match self {
            PrefixModule::Direct(p) => p.visit(f),
            PrefixModule::Reparameterized(r) => r.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        match self {
            PrefixModule::Direct(p) => p.visit_mut(f),
            PrefixModule::Reparameterized(r) => r.visit_mut(f),
        }
    }
}
