use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PvtmError;
use crate::corpus::BowVector;
use crate::nn::{self, log_softmax, sigmoid, slice_of, slice_of_mut, softmax, softplus, ParamSet};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Array1<f64>,
    /// Clamped to `[LOG_VAR_MIN, LOG_VAR_MAX]`.
    pub log_var: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub z: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    /// Laplace approximation of a symmetric Dirichlet with concentration 1/K.
    #[default]
    LaplaceDirichlet,
    StandardNormal,
}

/// Diagonal Gaussian prior over the latent. `log_var0` is stored so that a posterior equal
/// to the prior gives a KL of exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorParams {
    pub mu0: Array1<f64>,
    pub var0: Array1<f64>,
    pub log_var0: Array1<f64>,
}

impl PriorParams {
    pub fn from_mean_var(mu0: Array1<f64>, var0: Array1<f64>) -> Self {
        assert!(var0.iter().all(|&v| v > 0.0), "prior variance must be positive");
        let log_var0 = var0.mapv(f64::ln);
        PriorParams { mu0, var0, log_var0 }
    }

    pub fn standard_normal(k: usize) -> Self {
        Self::from_mean_var(Array1::zeros(k), Array1::ones(k))
    }

    /// Laplace approximation to `Dirichlet(alpha)` with `alpha = 1/K` in every component:
    /// `mu0 = 0`, `var0 = (1/alpha)(1 - 2/K) + 1/(K alpha)`. With a single topic the variance
    /// degenerates to 0, so `K = 1` uses unit variance instead.
    pub fn laplace_dirichlet(k: usize) -> Self {
        if k < 2 {
            return Self::standard_normal(k);
        }
        let kf = k as f64;
        let alpha = 1.0 / kf;
        let var = (1.0 / alpha) * (1.0 - 2.0 / kf) + 1.0 / (kf * alpha);
        Self::from_mean_var(Array1::zeros(k), Array1::from_elem(k, var))
    }

    pub fn new(kind: PriorKind, k: usize) -> Self {
        match kind {
            PriorKind::LaplaceDirichlet => Self::laplace_dirichlet(k),
            PriorKind::StandardNormal => Self::standard_normal(k),
        }
    }

    pub fn k(&self) -> usize {
        self.mu0.len()
    }
}

/// Closed-form `KL(N(mu, exp(log_var)) || N(mu0, var0))` for diagonal Gaussians.
pub fn kl_divergence(post: &GaussianPosterior, prior: &PriorParams) -> f64 {
    let mut kl = 0.0;
    for k in 0..post.mu.len() {
        let r = post.log_var[k] - prior.log_var0[k];
        let d = post.mu[k] - prior.mu0[k];
        kl += r.exp_m1() - r + d * d / prior.var0[k];
    }
    0.5 * kl
}

/// `z = mu + exp(log_var / 2) * noise`.
pub fn reparameterize(post: &GaussianPosterior, noise: ArrayView1<f64>) -> LatentSample {
    let z = &post.mu + &(post.log_var.mapv(|lv| (0.5 * lv).exp()) * &noise);
    LatentSample { z }
}

/// Unnormalized topic-word weights, `K x V`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicWordMatrix {
    pub beta_logits: Array2<f64>,
}

impl TopicWordMatrix {
    /// Row-softmax of the logits.
    pub fn topic_word(&self) -> Array2<f64> {
        nn::softmax_rows(&self.beta_logits)
    }
}

/// ProdLDA decoder: `theta = softmax(z)`, `p(w) = softmax(theta^T beta)`.
pub fn decode(z: &LatentSample, beta: &TopicWordMatrix) -> Array1<f64> {
    let theta = softmax(z.z.view());
    softmax(theta.dot(&beta.beta_logits).view())
}

/// Two MLP heads over a shared softplus hidden layer.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceNet {
    pub w_hidden: Array2<f64>,
    pub b_hidden: Array1<f64>,
    pub w_mu: Array2<f64>,
    pub b_mu: Array1<f64>,
    pub w_log_var: Array2<f64>,
    pub b_log_var: Array1<f64>,
}

impl InferenceNet {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input_dim: usize, hidden: usize, k: usize) -> Self {
        InferenceNet {
            w_hidden: nn::uniform_fan_in(rng, input_dim, hidden),
            b_hidden: Array1::zeros(hidden),
            w_mu: nn::uniform_fan_in(rng, hidden, k),
            b_mu: Array1::zeros(k),
            w_log_var: nn::uniform_fan_in(rng, hidden, k),
            b_log_var: Array1::zeros(k),
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize, k: usize) -> Self {
        InferenceNet {
            w_hidden: Array2::zeros((input_dim, hidden)),
            b_hidden: Array1::zeros(hidden),
            w_mu: Array2::zeros((hidden, k)),
            b_mu: Array1::zeros(k),
            w_log_var: Array2::zeros((hidden, k)),
            b_log_var: Array1::zeros(k),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_hidden.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hidden.ncols()
    }

    pub fn k(&self) -> usize {
        self.w_mu.ncols()
    }
}

/// Trainable VAE parameters: inference heads and topic-word logits.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeParams {
    pub inference: InferenceNet,
    pub beta: TopicWordMatrix,
}

impl VaeParams {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input_dim: usize, hidden: usize, k: usize, vocab: usize) -> Self {
        let inference = InferenceNet::new(rng, input_dim, hidden, k);
        let beta = TopicWordMatrix {
            beta_logits: nn::uniform_fan_in(rng, k, vocab),
        };
        VaeParams { inference, beta }
    }

    pub fn zeros_like(&self) -> Self {
        let i = &self.inference;
        VaeParams {
            inference: InferenceNet::zeros(i.input_dim(), i.hidden_dim(), i.k()),
            beta: TopicWordMatrix {
                beta_logits: Array2::zeros(self.beta.beta_logits.raw_dim()),
            },
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.visit_mut(&mut |_, s| s.iter_mut().for_each(|v| *v *= factor));
    }

    pub fn add_assign(&mut self, other: &VaeParams) {
        let mut others: Vec<Vec<f64>> = Vec::new();
        other.visit(&mut |_, s| others.push(s.to_vec()));
        let mut i = 0;
        self.visit_mut(&mut |_, s| {
            s.iter_mut().zip(&others[i]).for_each(|(a, b)| *a += b);
            i += 1;
        });
    }

    /// Posterior for one input embedding; `dropout` is the (already rescaled) hidden mask.
    pub fn posterior(&self, input: ArrayView1<f64>, dropout: Option<&Array1<f64>>) -> Result<GaussianPosterior, PvtmError> {
        Ok(self.forward_inference(input, dropout)?.posterior)
    }

    fn forward_inference(
        &self,
        input: ArrayView1<f64>,
        dropout: Option<&Array1<f64>>,
    ) -> Result<InferenceCache, PvtmError> {
        let net = &self.inference;
        if input.len() != net.input_dim() {
            return Err(PvtmError::DimensionMismatch {
                expected: net.input_dim(),
                found: input.len(),
            });
        }
        let pre = nn::affine_vec(input, net.w_hidden.view(), net.b_hidden.view());
        let mut hidden = pre.mapv(softplus);
        if let Some(mask) = dropout {
            hidden *= mask;
        }
        let mu = nn::affine_vec(hidden.view(), net.w_mu.view(), net.b_mu.view());
        let raw_log_var = nn::affine_vec(hidden.view(), net.w_log_var.view(), net.b_log_var.view());
        let log_var = raw_log_var.mapv(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX));
        Ok(InferenceCache {
            pre,
            hidden,
            raw_log_var,
            posterior: GaussianPosterior { mu, log_var },
        })
    }
}

struct InferenceCache {
    pre: Array1<f64>,
    hidden: Array1<f64>,
    raw_log_var: Array1<f64>,
    posterior: GaussianPosterior,
}

/// Per-document randomness, injected so the objective is a deterministic function.
#[derive(Debug, Clone, PartialEq)]
pub struct DocNoise {
    pub eps: Array1<f64>,
    /// Rescaled keep-mask on the inference hidden layer; `None` disables dropout.
    pub dropout: Option<Array1<f64>>,
}

impl DocNoise {
    pub fn zeros(k: usize) -> Self {
        DocNoise {
            eps: Array1::zeros(k),
            dropout: None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, k: usize, hidden: usize, dropout: f64) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        let eps = Array1::from_shape_simple_fn(k, || StandardNormal.sample(rng));
        let dropout = (dropout > 0.0).then(|| {
            let keep = 1.0 / (1.0 - dropout);
            Array1::from_shape_simple_fn(hidden, || if rng.random::<f64>() < dropout { 0.0 } else { keep })
        });
        DocNoise { eps, dropout }
    }
}

/// ELBO pieces summed over documents: `loss = -(reconstruction - kl)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ElboTerms {
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
}

impl std::ops::AddAssign for ElboTerms {
    fn add_assign(&mut self, o: Self) {
        self.loss += o.loss;
        self.reconstruction += o.reconstruction;
        self.kl += o.kl;
    }
}

/// Single-sample ELBO terms for one document and, when `grad` is given, the gradient of
/// `scale * loss` accumulated into it. Returns the gradient w.r.t. the input embedding.
pub(crate) fn doc_elbo(
    params: &VaeParams,
    prior: &PriorParams,
    input: ArrayView1<f64>,
    target: &BowVector,
    noise: &DocNoise,
    grad: Option<(&mut VaeParams, f64)>,
) -> Result<(ElboTerms, Option<Array1<f64>>), PvtmError> {
    let cache = params.forward_inference(input, noise.dropout.as_ref())?;
    let post = &cache.posterior;
    let sample = reparameterize(post, noise.eps.view());
    let theta = softmax(sample.z.view());
    let logits = theta.dot(&params.beta.beta_logits);
    let log_p = log_softmax(logits.view());
    let reconstruction: f64 = target.entries().iter().map(|&(v, c)| c as f64 * log_p[v]).sum();
    let kl = kl_divergence(post, prior);
    let terms = ElboTerms {
        loss: -(reconstruction - kl),
        reconstruction,
        kl,
    };

    let Some((g, scale)) = grad else {
        return Ok((terms, None));
    };
    let n_d = target.total() as f64;
    // d loss / d logits = N p - counts
    let mut d_logits = log_p.mapv(|lp| n_d * lp.exp());
    for &(v, c) in target.entries() {
        d_logits[v] -= c as f64;
    }
    d_logits *= scale;
    g.beta.beta_logits += &outer(theta.view(), d_logits.view());
    let d_theta = params.beta.beta_logits.dot(&d_logits);
    let d_z = &theta * &(&d_theta - theta.dot(&d_theta));

    let std = post.log_var.mapv(|lv| (0.5 * lv).exp());
    let d_mu = &d_z + &((&post.mu - &prior.mu0) / &prior.var0 * scale);
    let mut d_log_var = Array1::zeros(post.mu.len());
    for k in 0..d_log_var.len() {
        if cache.raw_log_var[k] > LOG_VAR_MIN && cache.raw_log_var[k] < LOG_VAR_MAX {
            let r = post.log_var[k] - prior.log_var0[k];
            d_log_var[k] = d_z[k] * noise.eps[k] * 0.5 * std[k] + scale * 0.5 * r.exp_m1();
        }
    }

    let net = &params.inference;
    let gi = &mut g.inference;
    gi.w_mu += &outer(cache.hidden.view(), d_mu.view());
    gi.b_mu += &d_mu;
    gi.w_log_var += &outer(cache.hidden.view(), d_log_var.view());
    gi.b_log_var += &d_log_var;
    let mut d_hidden = net.w_mu.dot(&d_mu) + net.w_log_var.dot(&d_log_var);
    if let Some(mask) = &noise.dropout {
        d_hidden *= mask;
    }
    let d_pre = &d_hidden * &cache.pre.mapv(sigmoid);
    gi.w_hidden += &outer(input, d_pre.view());
    gi.b_hidden += &d_pre;
    Ok((terms, Some(net.w_hidden.dot(&d_pre))))
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    a.insert_axis(Axis(1)).dot(&b.insert_axis(Axis(0)))
}

impl ParamSet for VaeParams {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        let i = &self.inference;
        f("inference.w_hidden", slice_of(&i.w_hidden));
        f("inference.b_hidden", slice_of(&i.b_hidden));
        f("inference.w_mu", slice_of(&i.w_mu));
        f("inference.b_mu", slice_of(&i.b_mu));
        f("inference.w_log_var", slice_of(&i.w_log_var));
        f("inference.b_log_var", slice_of(&i.b_log_var));
        f("beta_logits", slice_of(&self.beta.beta_logits));
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        let i = &mut self.inference;
        f("inference.w_hidden", slice_of_mut(&mut i.w_hidden));
        f("inference.b_hidden", slice_of_mut(&mut i.b_hidden));
        f("inference.w_mu", slice_of_mut(&mut i.w_mu));
        f("inference.b_mu", slice_of_mut(&mut i.b_mu));
        f("inference.w_log_var", slice_of_mut(&mut i.w_log_var));
        f("inference.b_log_var", slice_of_mut(&mut i.b_log_var));
        f("beta_logits", slice_of_mut(&mut self.beta.beta_logits));
    }
}
