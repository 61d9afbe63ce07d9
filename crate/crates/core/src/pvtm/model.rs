use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{InputEncoding, TrainingData};
use super::vae::{doc_elbo, DocNoise, ElboTerms, GaussianPosterior, PriorKind, PriorParams, VaeParams};
use super::{PvtmError, Variant};
use crate::corpus::{bow_vectorize, preprocess, BowVector, PreprocessOptions, Vocabulary};
use crate::encoder::{
    BaseEncoder, ForwardCache, PrefixGrad, PrefixModule, PrefixParameters, PrefixReparam,
    DEFAULT_NUM_VIRTUAL_TOKENS, PREFIX_INIT_STD,
};
use crate::nn::{self, Adam, AdamConfig, ParamSet};
use crate::util::top_word_ids;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub num_topics: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub prefix_learning_rate: f64,
    pub hidden_size: usize,
    pub dropout: f64,
    pub prior: PriorKind,
    pub input_encoding: InputEncoding,
    pub num_virtual_tokens: usize,
    /// Train the prefix through a bottleneck network instead of directly.
    pub prefix_reparam: bool,
    pub prefix_bottleneck: usize,
    /// When false the prefix stays at its initial value and embeddings are computed once.
    pub train_prefix: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::S2L,
            num_topics: 20,
            epochs: 100,
            batch_size: 64,
            learning_rate: 2e-3,
            prefix_learning_rate: 1e-4,
            hidden_size: 200,
            dropout: 0.2,
            prior: PriorKind::LaplaceDirichlet,
            input_encoding: InputEncoding::Transformer,
            num_virtual_tokens: DEFAULT_NUM_VIRTUAL_TOKENS,
            prefix_reparam: false,
            prefix_bottleneck: 64,
            train_prefix: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PvtmError> {
        let bad = |m: &str| Err(PvtmError::InvalidConfig(m.to_owned()));
        if self.num_topics < 1 {
            return bad("num_topics must be >= 1");
        }
        if self.epochs < 1 || self.batch_size < 1 || self.hidden_size < 1 {
            return bad("epochs, batch_size and hidden_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0) || self.prefix_learning_rate < 0.0 {
            return bad("learning rates must be positive");
        }
        if self.input_encoding == InputEncoding::Transformer && self.num_virtual_tokens < 1 {
            return bad("num_virtual_tokens must be >= 1");
        }
        if self.prefix_reparam && self.prefix_bottleneck < 1 {
            return bad("prefix_bottleneck must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Per-document means over the epoch.
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochStats>,
}

impl TrainingLog {
    pub fn first_loss(&self) -> Option<f64> {
        self.epochs.first().map(|e| e.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}

/// Gradient of the summed batch loss.
#[derive(Debug, Clone)]
pub struct ElboGradient {
    pub vae: VaeParams,
    /// W.r.t. the injected prefix entries; `None` for BOW input.
    pub prefix: Option<PrefixGrad>,
}

/// A trained (or freshly initialized) topic model.
#[derive(Debug, Clone)]
pub struct PvtmModel {
    pub config: TrainConfig,
    pub vocabulary: Vocabulary,
    pub params: VaeParams,
    pub prior: PriorParams,
    /// Materialized prefix; `None` with BOW input.
    pub prefix: Option<PrefixParameters>,
    encoder: Option<Arc<BaseEncoder>>,
}

#[derive(Clone, Copy)]
enum Input<'a> {
    Text(&'a str),
    Bow(&'a BowVector),
}

impl PvtmModel {
    /// Randomly initialized model. `encoder` is required for transformer input.
    pub fn new(config: TrainConfig, vocabulary: Vocabulary, encoder: Option<Arc<BaseEncoder>>) -> Result<Self, PvtmError> {
        config.validate()?;
        if vocabulary.is_empty() {
            return Err(PvtmError::InvalidConfig("empty vocabulary".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (input_dim, prefix, encoder) = match config.input_encoding {
            InputEncoding::Transformer => {
                let enc = encoder.ok_or_else(|| {
                    PvtmError::InvalidConfig("transformer input requires a base encoder".into())
                })?;
                let prefix = PrefixParameters::random(
                    &enc,
                    config.num_virtual_tokens,
                    PREFIX_INIT_STD,
                    config.seed.wrapping_add(1),
                );
                (enc.embedding_dim(), Some(prefix), Some(enc))
            }
            InputEncoding::Bow => (vocabulary.len(), None, None),
        };
        let params = VaeParams::new(&mut rng, input_dim, config.hidden_size, config.num_topics, vocabulary.len());
        Ok(PvtmModel {
            prior: PriorParams::new(config.prior, config.num_topics),
            config,
            vocabulary,
            params,
            prefix,
            encoder,
        })
    }

    /// Reassembles a model from stored parts, checking that the pieces fit together.
    pub fn from_parts(
        config: TrainConfig,
        vocabulary: Vocabulary,
        params: VaeParams,
        prefix: Option<PrefixParameters>,
        encoder: Option<Arc<BaseEncoder>>,
    ) -> Result<Self, PvtmError> {
        let model = PvtmModel {
            prior: PriorParams::new(config.prior, config.num_topics),
            config,
            vocabulary,
            params,
            prefix,
            encoder,
        };
        let expect_input = match model.config.input_encoding {
            InputEncoding::Transformer => {
                let (Some(enc), Some(prefix)) = (&model.encoder, &model.prefix) else {
                    return Err(PvtmError::InvalidConfig("transformer input requires encoder and prefix".into()));
                };
                enc.check_prefix(prefix)?;
                enc.embedding_dim()
            }
            InputEncoding::Bow => model.vocabulary.len(),
        };
        let dims = [
            (model.params.inference.input_dim(), expect_input),
            (model.params.inference.k(), model.config.num_topics),
            (model.params.beta.beta_logits.nrows(), model.config.num_topics),
            (model.params.beta.beta_logits.ncols(), model.vocabulary.len()),
        ];
        for (found, expected) in dims {
            if found != expected {
                return Err(PvtmError::DimensionMismatch { expected, found });
            }
        }
        Ok(model)
    }

    pub fn k(&self) -> usize {
        self.config.num_topics
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn input_dim(&self) -> usize {
        self.params.inference.input_dim()
    }

    pub fn encoder(&self) -> Option<&Arc<BaseEncoder>> {
        self.encoder.as_ref()
    }

    fn embed(&self, input: Input<'_>, keep_cache: bool) -> (Array1<f64>, Option<ForwardCache>) {
        match (input, &self.encoder) {
            (Input::Bow(bow), _) => (bow.to_dense().into_iter().map(f64::from).collect(), None),
            (Input::Text(text), Some(enc)) if self.config.input_encoding == InputEncoding::Transformer => {
                let ids = enc.tokenize(text);
                let (emb, cache) = enc.forward(&ids, self.prefix.as_ref());
                (emb, keep_cache.then_some(cache))
            }
            (Input::Text(text), _) => {
                let tokens = preprocess(text, &PreprocessOptions::default());
                let bow = bow_vectorize(&tokens, &self.vocabulary);
                (bow.to_dense().into_iter().map(f64::from).collect(), None)
            }
        }
    }

    /// Model input vector for a text: pooled encoder embedding, or BOW counts.
    pub fn input_vector(&self, text: &str) -> Array1<f64> {
        self.embed(Input::Text(text), false).0
    }

    /// Deterministic posterior (no dropout) for one text.
    pub fn posterior(&self, text: &str) -> Result<GaussianPosterior, PvtmError> {
        self.params.posterior(self.input_vector(text).view(), None)
    }

    /// Topic proportions `softmax(mu)` for each text.
    pub fn doc_topics<S: AsRef<str>>(&self, texts: &[S]) -> Result<Vec<Array1<f64>>, PvtmError> {
        texts
            .iter()
            .map(|t| Ok(nn::softmax(self.posterior(t.as_ref())?.mu.view())))
            .collect()
    }

    /// Topic proportions from precomputed input BOWs (BOW input only).
    pub fn doc_topics_from_bows(&self, bows: &[BowVector]) -> Result<Vec<Array1<f64>>, PvtmError> {
        bows.iter()
            .map(|b| {
                let (x, _) = self.embed(Input::Bow(b), false);
                Ok(nn::softmax(self.params.posterior(x.view(), None)?.mu.view()))
            })
            .collect()
    }

    /// Row-normalized topic-word distributions, `K x V`.
    pub fn topic_word(&self) -> Array2<f64> {
        self.params.beta.topic_word()
    }

    /// The `n` highest-weight tokens per topic; ties go to the smaller token id.
    pub fn top_words(&self, n: usize) -> Vec<Vec<String>> {
        top_word_ids(&self.params.beta.beta_logits, n)
            .into_iter()
            .map(|ids| {
                ids.into_iter()
                    .map(|i| self.vocabulary.token(i).expect("id within vocabulary").to_owned())
                    .collect()
            })
            .collect()
    }

    fn inputs_for<'a>(&self, data: &'a TrainingData) -> Vec<Input<'a>> {
        match self.config.input_encoding {
            InputEncoding::Transformer => data.inputs.iter().map(|t| Input::Text(t)).collect(),
            InputEncoding::Bow => data.input_bows.iter().map(Input::Bow).collect(),
        }
    }

    fn batch_elbo(
        &self,
        inputs: &[Input<'_>],
        targets: &[&BowVector],
        noise: &[DocNoise],
        grad_scale: Option<f64>,
        embeddings: Option<&[Array1<f64>]>,
    ) -> Result<(ElboTerms, Option<ElboGradient>), PvtmError> {
        let mut terms = ElboTerms::default();
        let mut vae_grad = grad_scale.map(|_| self.params.zeros_like());
        let want_prefix = grad_scale.is_some() && embeddings.is_none() && self.prefix.is_some();
        let mut prefix_grad: Option<PrefixGrad> = want_prefix.then(|| self.prefix.as_ref().unwrap().zeros_like().layers);
        for (i, ((input, target), n)) in inputs.iter().zip(targets).zip(noise).enumerate() {
            let (x, cache) = match embeddings {
                Some(e) => (e[i].clone(), None),
                None => self.embed(*input, want_prefix),
            };
            let grad = vae_grad.as_mut().zip(grad_scale);
            let (t, d_x) = doc_elbo(&self.params, &self.prior, x.view(), target, n, grad)?;
            terms += t;
            if let (Some(pg), Some(cache), Some(d_x)) = (prefix_grad.as_mut(), cache, d_x) {
                let enc = self.encoder.as_ref().expect("prefix implies encoder");
                for (acc, g) in pg.iter_mut().zip(enc.backward(&cache, &d_x)) {
                    acc.key += &g.key;
                    acc.value += &g.value;
                }
            }
        }
        Ok((terms, vae_grad.map(|vae| ElboGradient { vae, prefix: prefix_grad })))
    }

    /// Summed single-sample ELBO terms over a batch of texts with injected noise.
    pub fn elbo<S: AsRef<str>>(
        &self,
        texts: &[S],
        targets: &[BowVector],
        noise: &[DocNoise],
    ) -> Result<ElboTerms, PvtmError> {
        self.check_batch(texts.len(), targets, noise)?;
        let inputs: Vec<Input<'_>> = texts.iter().map(|t| Input::Text(t.as_ref())).collect();
        let targets: Vec<&BowVector> = targets.iter().collect();
        Ok(self.batch_elbo(&inputs, &targets, noise, None, None)?.0)
    }

    /// [`PvtmModel::elbo`] plus the gradient of the summed loss.
    pub fn elbo_with_grad<S: AsRef<str>>(
        &self,
        texts: &[S],
        targets: &[BowVector],
        noise: &[DocNoise],
    ) -> Result<(ElboTerms, ElboGradient), PvtmError> {
        self.check_batch(texts.len(), targets, noise)?;
        let inputs: Vec<Input<'_>> = texts.iter().map(|t| Input::Text(t.as_ref())).collect();
        let targets: Vec<&BowVector> = targets.iter().collect();
        let (terms, grad) = self.batch_elbo(&inputs, &targets, noise, Some(1.0), None)?;
        Ok((terms, grad.expect("gradient requested")))
    }

    fn check_batch(&self, n: usize, targets: &[BowVector], noise: &[DocNoise]) -> Result<(), PvtmError> {
        for len in [targets.len(), noise.len()] {
            if len != n {
                return Err(PvtmError::DimensionMismatch { expected: n, found: len });
            }
        }
        for t in targets {
            if t.dim() != self.vocab_size() {
                return Err(PvtmError::DimensionMismatch {
                    expected: self.vocab_size(),
                    found: t.dim(),
                });
            }
        }
        Ok(())
    }
}

/// Jointly fits the inference network, topic-word logits and prefix with Adam.
/// The base encoder is only read. Runs are deterministic for a fixed seed.
pub fn train(
    data: &TrainingData,
    encoder: Option<Arc<BaseEncoder>>,
    config: &TrainConfig,
) -> Result<(PvtmModel, TrainingLog), PvtmError> {
    if config.variant != data.variant {
        return Err(PvtmError::InvalidConfig(format!(
            "training data prepared for {} but config asks for {}",
            data.variant, config.variant
        )));
    }
    if data.is_empty() {
        return Err(PvtmError::InvalidConfig("no training documents".into()));
    }
    let mut model = PvtmModel::new(config.clone(), data.vocabulary.clone(), encoder)?;
    let mut module = match (&model.prefix, &model.encoder) {
        (Some(_), Some(enc)) if config.prefix_reparam => Some(PrefixModule::Reparameterized(PrefixReparam::new(
            enc,
            config.num_virtual_tokens,
            config.prefix_bottleneck,
            PREFIX_INIT_STD,
            config.seed.wrapping_add(1),
        ))),
        (Some(p), _) => Some(PrefixModule::Direct(p.clone())),
        _ => None,
    };
    if let Some(m) = &module {
        model.prefix = Some(m.materialize());
    }
    let train_prefix = config.train_prefix && module.is_some() && config.prefix_learning_rate > 0.0;

    let mut vae_opt = Adam::new(AdamConfig::with_lr(config.learning_rate), &model.params);
    let mut prefix_opt = module
        .as_ref()
        .map(|m| Adam::new(AdamConfig::with_lr(config.prefix_learning_rate), m));
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(2));

    let inputs = model.inputs_for(data);
    let fixed_embeddings: Option<Vec<Array1<f64>>> = (!train_prefix).then(|| {
        inputs
            .iter()
            .map(|&i| model.embed(i, false).0)
            .collect()
    });

    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainingLog::default();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_terms = ElboTerms::default();
        for batch in order.chunks(config.batch_size) {
            let noise: Vec<DocNoise> = batch
                .iter()
                .map(|_| DocNoise::sample(&mut rng, config.num_topics, config.hidden_size, config.dropout))
                .collect();
            let batch_inputs: Vec<Input<'_>> = batch.iter().map(|&i| inputs[i]).collect();
            let targets: Vec<&BowVector> = batch.iter().map(|&i| &data.targets[i]).collect();
            let batch_emb: Option<Vec<Array1<f64>>> = fixed_embeddings
                .as_ref()
                .map(|e| batch.iter().map(|&i| e[i].clone()).collect());
            let scale = 1.0 / batch.len() as f64;
            let (terms, grad) =
                model.batch_elbo(&batch_inputs, &targets, &noise, Some(scale), batch_emb.as_deref())?;
            let grad = grad.expect("gradient requested");
            if !terms.loss.is_finite() || !grad.vae.all_finite() {
                return Err(PvtmError::NaNLoss {
                    epoch,
                    batch: batch.iter().map(|&i| data.doc_ids[i].clone()).collect(),
                });
            }
            epoch_terms += terms;
            vae_opt.step(&mut model.params, &grad.vae);
            if let (true, Some(m), Some(opt), Some(pg)) = (train_prefix, module.as_mut(), prefix_opt.as_mut(), &grad.prefix)
            {
                let g = m.backward(pg);
                opt.step(m, &g);
                model.prefix = Some(m.materialize());
            }
        }
        let nf = n as f64;
        let stats = EpochStats {
            epoch,
            loss: epoch_terms.loss / nf,
            reconstruction: epoch_terms.reconstruction / nf,
            kl: epoch_terms.kl / nf,
        };
        log::debug!("epoch {epoch}: loss {:.4} (rec {:.4}, kl {:.4})", stats.loss, stats.reconstruction, stats.kl);
        log.epochs.push(stats);
    }
    Ok((model, log))
}
