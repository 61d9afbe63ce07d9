use std::collections::HashSet;

use super::{EvalError, TopicSet};

pub const DEFAULT_PERSISTENCE: f64 = 0.9;

/// Rank-biased overlap truncated at the list length and normalized so identical lists score 1:
/// `sum_d w_d |A[..d] ∩ B[..d]| / d` with `w_d = (1-p) p^(d-1) / (1 - p^dmax)`.
pub fn rbo<S: AsRef<str>>(a: &[S], b: &[S], p: f64) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(EvalError::InvalidInput(format!("persistence {p} outside (0, 1)")));
    }
    let depth = a.len();
    if depth == 0 {
        return Ok(1.0);
    }
    let norm = 1.0 - p.powi(depth as i32);
    let mut seen_a = HashSet::new();
    let mut seen_b = HashSet::new();
    let mut overlap = 0usize;
    let mut score = 0.0;
    let mut weight = (1.0 - p) / norm;
    for d in 0..depth {
        let (x, y) = (a[d].as_ref(), b[d].as_ref());
        if seen_a.insert(x) && seen_b.contains(x) {
            overlap += 1;
        }
        if seen_b.insert(y) && seen_a.contains(y) {
            overlap += 1;
        }
        score += weight * overlap as f64 / (d + 1) as f64;
        weight *= p;
    }
    Ok(score.clamp(0.0, 1.0))
}

/// `1 -` the mean RBO over all unordered topic pairs.
pub fn irbo(topics: &TopicSet, p: f64) -> Result<f64, EvalError> {
    let k = topics.len();
    if k < 2 {
        return Err(EvalError::TooFewTopics { needed: 2, found: k });
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in i + 1..k {
            total += rbo(&topics.topics[i], &topics.topics[j], p)?;
            pairs += 1;
        }
    }
    Ok((1.0 - total / pairs as f64).clamp(0.0, 1.0))
}
