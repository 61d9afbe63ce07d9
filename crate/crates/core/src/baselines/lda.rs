use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BaselineError;
use crate::corpus::BowVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LdaConfig {
    pub num_topics: usize,
    /// Symmetric document-topic concentration; `None` means `50 / K`.
    pub alpha: Option<f64>,
    pub eta: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for LdaConfig {
    fn default() -> Self {
        LdaConfig {
            num_topics: 20,
            alpha: None,
            eta: 0.01,
            iterations: 100,
            seed: 0,
        }
    }
}

impl LdaConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(50.0 / self.num_topics as f64)
    }
}

/// Sampler state: one topic per token plus the three count tables.
#[derive(Debug, Clone, PartialEq)]
pub struct GibbsState {
    pub words: Vec<Vec<usize>>,
    pub assignments: Vec<Vec<usize>>,
    pub n_dk: Array2<u32>,
    pub n_kw: Array2<u32>,
    pub n_k: Vec<u32>,
    pub alpha: f64,
    pub eta: f64,
}

impl GibbsState {
    /// Expands each BOW into tokens (in id order) and assigns topics uniformly at random.
    pub fn new<R: Rng + ?Sized>(bows: &[BowVector], k: usize, alpha: f64, eta: f64, rng: &mut R) -> Self {
        let v = bows.first().map_or(0, BowVector::dim);
        let words: Vec<Vec<usize>> = bows
            .iter()
            .map(|b| {
                b.entries()
                    .iter()
                    .flat_map(|&(w, c)| std::iter::repeat_n(w, c as usize))
                    .collect()
            })
            .collect();
        let assignments: Vec<Vec<usize>> = words
            .iter()
            .map(|ws| ws.iter().map(|_| rng.random_range(0..k)).collect())
            .collect();
        let mut state = GibbsState {
            n_dk: Array2::zeros((words.len(), k)),
            n_kw: Array2::zeros((k, v)),
            n_k: vec![0; k],
            words,
            assignments,
            alpha,
            eta,
        };
        let (n_dk, n_kw, n_k) = state.recount();
        state.n_dk = n_dk;
        state.n_kw = n_kw;
        state.n_k = n_k;
        state
    }

    pub fn num_topics(&self) -> usize {
        self.n_k.len()
    }

    fn recount(&self) -> (Array2<u32>, Array2<u32>, Vec<u32>) {
        let (k, v) = self.n_kw.dim();
        let mut n_dk = Array2::zeros((self.words.len(), k));
        let mut n_kw = Array2::zeros((k, v));
        let mut n_k = vec![0; k];
        for (d, (ws, zs)) in self.words.iter().zip(&self.assignments).enumerate() {
            for (&w, &z) in ws.iter().zip(zs) {
                n_dk[[d, z]] += 1;
                n_kw[[z, w]] += 1;
                n_k[z] += 1;
            }
        }
        (n_dk, n_kw, n_k)
    }

    /// True when the count tables equal a full recount from the assignments.
    pub fn counts_consistent(&self) -> bool {
        let (n_dk, n_kw, n_k) = self.recount();
        n_dk == self.n_dk && n_kw == self.n_kw && n_k == self.n_k
    }

    /// One full sweep of the collapsed conditional over every token.
    pub fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let k = self.num_topics();
        let v_eta = self.n_kw.ncols() as f64 * self.eta;
        let mut weights = vec![0.0; k];
        for d in 0..self.words.len() {
            for i in 0..self.words[d].len() {
                let w = self.words[d][i];
                let old = self.assignments[d][i];
                self.n_dk[[d, old]] -= 1;
                self.n_kw[[old, w]] -= 1;
                self.n_k[old] -= 1;

                let mut total = 0.0;
                for (t, weight) in weights.iter_mut().enumerate() {
                    total += (self.n_dk[[d, t]] as f64 + self.alpha) * (self.n_kw[[t, w]] as f64 + self.eta)
                        / (self.n_k[t] as f64 + v_eta);
                    *weight = total;
                }
                let u = rng.random::<f64>() * total;
                let new = weights.iter().position(|&c| u < c).unwrap_or(k - 1);

                self.assignments[d][i] = new;
                self.n_dk[[d, new]] += 1;
                self.n_kw[[new, w]] += 1;
                self.n_k[new] += 1;
            }
        }
    }

    /// Smoothed document-topic proportions, `(n_dk + alpha) / (N_d + K alpha)`.
    pub fn doc_topic(&self) -> Array2<f64> {
        let k = self.num_topics() as f64;
        let mut out = self.n_dk.mapv(|c| c as f64 + self.alpha);
        for (d, mut row) in out.rows_mut().into_iter().enumerate() {
            let denom = self.words[d].len() as f64 + k * self.alpha;
            row.mapv_inplace(|x| x / denom);
        }
        out
    }

    /// Smoothed topic-word distributions, `(n_kw + eta) / (n_k + V eta)`.
    pub fn topic_word(&self) -> Array2<f64> {
        let v_eta = self.n_kw.ncols() as f64 * self.eta;
        let mut out = self.n_kw.mapv(|c| c as f64 + self.eta);
        for (t, mut row) in out.rows_mut().into_iter().enumerate() {
            let denom = self.n_k[t] as f64 + v_eta;
            row.mapv_inplace(|x| x / denom);
        }
        out
    }
}

/// Fitted LDA distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct LdaResult {
    /// `D x K`, rows on the simplex.
    pub doc_topic: Array2<f64>,
    /// `K x V`, rows on the simplex.
    pub topic_word: Array2<f64>,
}

/// Collapsed Gibbs sampling for LDA. Deterministic for a fixed seed.
pub fn lda_gibbs(bows: &[BowVector], config: &LdaConfig) -> Result<LdaResult, BaselineError> {
    if config.num_topics < 1 || config.iterations < 1 {
        return Err(BaselineError::InvalidConfig("num_topics and iterations must be >= 1".into()));
    }
    if !(config.alpha() > 0.0) || !(config.eta > 0.0) {
        return Err(BaselineError::InvalidConfig("alpha and eta must be positive".into()));
    }
    if bows.is_empty() {
        return Err(BaselineError::InvalidConfig("no documents".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = GibbsState::new(bows, config.num_topics, config.alpha(), config.eta, &mut rng);
    for it in 0..config.iterations {
        state.sweep(&mut rng);
        log::trace!("lda sweep {} done", it + 1);
    }
    Ok(LdaResult {
        doc_topic: state.doc_topic(),
        topic_word: state.topic_word(),
    })
}
