//! Small dense building blocks with explicit backward passes, plus Adam.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Visitor over trainable tensors, used by the optimizer and gradient checks.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, s| n += s.len());
        n
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }
}

pub(crate) fn slice_of<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
    a.as_slice().expect("parameters are contiguous")
}

pub(crate) fn slice_of_mut<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
    a.as_slice_mut().expect("parameters are contiguous")
}

pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, the usual default for dense layers.
pub fn uniform_fan_in<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
    Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng))
}

pub fn softmax(x: ArrayView1<f64>) -> Array1<f64> {
    let max = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut e = x.mapv(|v| (v - max).exp());
    let s = e.sum();
    e /= s;
    e
}

pub fn log_softmax(x: ArrayView1<f64>) -> Array1<f64> {
    let max = x.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + x.fold(0.0, |acc, &v| acc + (v - max).exp()).ln();
    x.mapv(|v| v - lse)
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Backward of a row softmax given its output `y` and upstream gradient `dy`.
pub fn softmax_rows_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let dot = (y * dy).sum_axis(Axis(1)).insert_axis(Axis(1));
    y * &(dy - &dot)
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_K: f64 = 1.702;

/// Sigmoid approximation of GELU, `x * sigmoid(1.702 x)`.
pub fn gelu(x: f64) -> f64 {
    x * sigmoid(GELU_K * x)
}

pub fn gelu_grad(x: f64) -> f64 {
    let s = sigmoid(GELU_K * x);
    s + GELU_K * x * s * (1.0 - s)
}

/// Row-wise layer normalization. Returns the output and the cache needed for backward.
pub fn layer_norm(
    x: &Array2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (r, mut row) in xhat.axis_iter_mut(Axis(0)).enumerate() {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.fold(0.0, |a, &v| a + v * v) / n;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        row.mapv_inplace(|v| v * is);
        inv_std[r] = is;
    }
    let y = &xhat * &gamma + &beta;
    (y, LayerNormCache { xhat, inv_std })
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Gradient w.r.t. the layer-norm input (gamma and beta are frozen here).
pub fn layer_norm_backward(dy: &Array2<f64>, gamma: ArrayView1<f64>, cache: &LayerNormCache) -> Array2<f64> {
    let n = dy.ncols() as f64;
    let dxhat = dy * &gamma;
    let mut dx = dxhat.clone();
    for (r, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
        let xh = cache.xhat.row(r);
        let mean_d = row.sum() / n;
        let mean_dx = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
        let is = cache.inv_std[r];
        row.zip_mut_with(&xh, |d, &h| *d = is * (*d - mean_d - h * mean_dx));
    }
    dx
}

/// `x W + b` for a batch of row vectors.
pub fn affine(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(w) + b
}

pub fn affine_vec(x: ArrayView1<f64>, w: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    x.dot(&w) + &b
}

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state for one parameter group, laid out in [`ParamSet`] visit order.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new<P: ParamSet + ?Sized>(config: AdamConfig, params: &P) -> Self {
        let mut m = Vec::new();
        params.visit(&mut |_, s| m.push(vec![0.0; s.len()]));
        let v = m.clone();
        Adam { config, m, v, step: 0 }
    }

    pub fn step<P: ParamSet + ?Sized, G: ParamSet + ?Sized>(&mut self, params: &mut P, grads: &G) {
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let mut grad_slices: Vec<Vec<f64>> = Vec::new();
        grads.visit(&mut |_, s| grad_slices.push(s.to_vec()));
        let mut idx = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_mut(&mut |_, p| {
            let g = &grad_slices[idx];
            let (mi, vi) = (&mut m[idx], &mut v[idx]);
            assert_eq!(g.len(), p.len(), "gradient layout differs from parameters");
            for j in 0..p.len() {
                mi[j] = c.beta1 * mi[j] + (1.0 - c.beta1) * g[j];
                vi[j] = c.beta2 * vi[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mhat = mi[j] / bc1;
                let vhat = vi[j] / bc2;
                p[j] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
            idx += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant() {
        let x = array![1.0, 2.0, -3.0, 1000.0];
        let s = softmax(x.view());
        assert!((s.sum() - 1.0).abs() < 1e-12);
        let s2 = softmax((&x + 5.0).view());
        for (a, b) in s.iter().zip(s2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let ls = log_softmax(x.view());
        for (a, b) in ls.iter().zip(s.iter()) {
            if *b > 0.0 {
                assert!((a - b.ln()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_difference() {
        let x = array![[0.3, -1.2, 2.0, 0.7], [1.0, 1.5, -0.5, 0.0]];
        let gamma = array![1.1, 0.9, -0.4, 2.0];
        let beta = array![0.1, 0.0, 0.3, -0.2];
        let w = array![[0.5, -1.0, 0.2, 0.8], [1.3, 0.1, -0.6, 0.4]];
        let loss = |x: &Array2<f64>| (&layer_norm(x, gamma.view(), beta.view()).0 * &w).sum();
        let (_, cache) = layer_norm(&x, gamma.view(), beta.view());
        let dx = layer_norm_backward(&w, gamma.view(), &cache);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-7, "{fd} vs {}", dx[[i, j]]);
            }
        }
    }

    struct Quadratic(Array1<f64>);
    impl ParamSet for Quadratic {
        fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
            f("x", slice_of(&self.0));
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
            f("x", slice_of_mut(&mut self.0));
        }
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = Quadratic(array![3.0, -2.0]);
        let mut opt = Adam::new(AdamConfig::with_lr(0.05), &p);
        for _ in 0..2000 {
            let g = Quadratic(p.0.mapv(|v| 2.0 * (v - 1.0)));
            opt.step(&mut p, &g);
        }
        assert!(p.0.iter().all(|v| (v - 1.0).abs() < 1e-3));
    }
}
