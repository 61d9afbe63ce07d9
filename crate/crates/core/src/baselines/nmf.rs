use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BaselineError;

pub const NMF_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmfConfig {
    pub num_topics: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for NmfConfig {
    fn default() -> Self {
        NmfConfig {
            num_topics: 20,
            iterations: 100,
            seed: 0,
        }
    }
}

/// `X ≈ W H` with `W: D x K` and `H: K x V`, both nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct NmfFactors {
    pub w: Array2<f64>,
    pub h: Array2<f64>,
}

impl NmfFactors {
    /// Squared Frobenius norm of `X - W H`.
    pub fn objective(&self, x: &Array2<f64>) -> f64 {
        (x - &self.w.dot(&self.h)).mapv(|e| e * e).sum()
    }

    /// Rows of `W` normalized to sum to one (uniform for all-zero rows).
    pub fn doc_topic(&self) -> Array2<f64> {
        normalize_rows(&self.w)
    }

    /// Rows of `H` normalized to sum to one (uniform for all-zero rows).
    pub fn topic_word(&self) -> Array2<f64> {
        normalize_rows(&self.h)
    }
}

fn normalize_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let s = row.sum();
        if s > 0.0 {
            row.mapv_inplace(|v| v / s);
        } else {
            let n = row.len() as f64;
            row.fill(1.0 / n);
        }
    }
    out
}

/// Lee–Seung multiplicative updates for the Frobenius loss. Returns the factors and the
/// objective after each iteration.
pub fn nmf(x: &Array2<f64>, config: &NmfConfig) -> Result<(NmfFactors, Vec<f64>), BaselineError> {
    if config.num_topics < 1 || config.iterations < 1 {
        return Err(BaselineError::InvalidConfig("num_topics and iterations must be >= 1".into()));
    }
    if x.is_empty() {
        return Err(BaselineError::InvalidConfig("empty matrix".into()));
    }
    if let Some(((row, col), _)) = x.indexed_iter().find(|(_, &v)| !(v >= 0.0) || !v.is_finite()) {
        return Err(BaselineError::NegativeInput { row, col });
    }
    let (d, v) = x.dim();
    let k = config.num_topics;
    let scale = (x.mean().unwrap_or(0.0) / k as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut f = NmfFactors {
        w: Array2::from_shape_simple_fn((d, k), || scale * rng.random::<f64>()),
        h: Array2::from_shape_simple_fn((k, v), || scale * rng.random::<f64>()),
    };
    let mut objective = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let num_h = f.w.t().dot(x);
        let den_h = f.w.t().dot(&f.w).dot(&f.h);
        f.h.zip_mut_with(&(num_h / (den_h + NMF_EPS)), |h, r| *h *= r);
        let num_w = x.dot(&f.h.t());
        let den_w = f.w.dot(&f.h.dot(&f.h.t()));
        f.w.zip_mut_with(&(num_w / (den_w + NMF_EPS)), |w, r| *w *= r);
        objective.push(f.objective(x));
    }
    Ok((f, objective))
}
