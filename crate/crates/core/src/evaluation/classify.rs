use std::collections::BTreeMap;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    #[serde(alias = "svm")]
    LinearSvm,
    #[serde(alias = "lr")]
    LogisticRegression,
}

impl FromStr for ClassifierKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "svm" | "linear-svm" => Ok(ClassifierKind::LinearSvm),
            "lr" | "logistic-regression" => Ok(ClassifierKind::LogisticRegression),
            _ => Err(format!("unknown classifier {s:?} (expected svm or lr)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifyConfig {
    pub kind: ClassifierKind,
    pub folds: usize,
    pub seed: u64,
    /// Inverse L2 strength for logistic regression.
    pub c: f64,
    pub lr_max_iter: usize,
    /// L2 strength of the hinge-loss SGD.
    pub svm_alpha: f64,
    pub svm_epochs: usize,
}

impl Default for ClassifyConfig {
    fn default() -> Self {
        ClassifyConfig {
            kind: ClassifierKind::LogisticRegression,
            folds: 5,
            seed: 0,
            c: 1.0,
            lr_max_iter: 1000,
            svm_alpha: 1e-4,
            svm_epochs: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub accuracy_mean: f64,
    pub accuracy_per_fold: Vec<f64>,
}

/// Multiclass linear scorer `x W + b`; predictions take the arg-max column.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl LinearModel {
    pub fn scores(&self, x: ArrayView1<f64>) -> Array1<f64> {
        x.dot(&self.w) + &self.b
    }

    pub fn predict(&self, x: ArrayView1<f64>) -> usize {
        let s = self.scores(x);
        let mut best = 0;
        for (i, &v) in s.iter().enumerate() {
            if v > s[best] {
                best = i;
            }
        }
        best
    }

    /// Multinomial logistic regression, `C * sum(log loss) + |W|^2 / 2`, minimized by gradient
    /// descent with backtracking line search. The bias is not penalized.
    pub fn fit_logistic(x: &Array2<f64>, y: &[usize], classes: usize, c: f64, max_iter: usize) -> Self {
        let (n, f) = x.dim();
        let mut onehot = Array2::zeros((n, classes));
        for (i, &l) in y.iter().enumerate() {
            onehot[[i, l]] = 1.0;
        }
        let objective = |m: &LinearModel| -> (f64, LinearModel) {
            let mut logits = x.dot(&m.w) + &m.b;
            let mut loss = 0.0;
            for (mut row, &l) in logits.rows_mut().into_iter().zip(y) {
                let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[l];
                row.mapv_inplace(|v| (v - lse).exp());
            }
            let d = (logits - &onehot) * c;
            let grad = LinearModel {
                w: x.t().dot(&d) + &m.w,
                b: d.sum_axis(Axis(0)),
            };
            (c * loss + 0.5 * m.w.mapv(|v| v * v).sum(), grad)
        };
        let mut model = LinearModel {
            w: Array2::zeros((f, classes)),
            b: Array1::zeros(classes),
        };
        let (mut value, mut grad) = objective(&model);
        let mut step = 1.0;
        for _ in 0..max_iter {
            let g2 = grad.w.mapv(|v| v * v).sum() + grad.b.mapv(|v| v * v).sum();
            if g2.sqrt() < 1e-6 {
                break;
            }
            let mut accepted = false;
            for _ in 0..60 {
                let trial = LinearModel {
                    w: &model.w - &(&grad.w * step),
                    b: &model.b - &(&grad.b * step),
                };
                let (tv, tg) = objective(&trial);
                if tv <= value - 0.5 * step * g2 {
                    model = trial;
                    value = tv;
                    grad = tg;
                    accepted = true;
                    step *= 2.0;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        model
    }

    /// One-vs-rest hinge loss trained by SGD for `epochs` passes, with the decreasing step
    /// `1 / (alpha (t0 + t))` and L2 shrinkage.
    pub fn fit_hinge(x: &Array2<f64>, y: &[usize], classes: usize, alpha: f64, epochs: usize, seed: u64) -> Self {
        let (n, f) = x.dim();
        let mut model = LinearModel {
            w: Array2::zeros((f, classes)),
            b: Array1::zeros(classes),
        };
        let typw = (1.0 / alpha.sqrt()).sqrt();
        let t0 = 1.0 / (alpha * typw);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mut t = 0.0;
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                let eta = 1.0 / (alpha * (t0 + t));
                let xi = x.row(i);
                let scores = model.scores(xi);
                model.w *= 1.0 - eta * alpha;
                for k in 0..classes {
                    let target = if y[i] == k { 1.0 } else { -1.0 };
                    if target * scores[k] < 1.0 {
                        model.w.column_mut(k).scaled_add(eta * target, &xi);
                        model.b[k] += eta * target;
                    }
                }
                t += 1.0;
            }
        }
        model
    }
}

/// Assigns each example to one of `folds` folds, spreading every class evenly. Classes are
/// shuffled internally with `seed`.
pub fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; labels.len()];
    let mut next = 0;
    for (class, mut members) in by_class {
        if members.len() < folds {
            log::warn!("class {class} has {} examples, fewer than {folds} folds", members.len());
        }
        members.shuffle(&mut rng);
        for i in members {
            assignment[i] = next % folds;
            next += 1;
        }
    }
    assignment
}

/// Stratified k-fold accuracy of a linear classifier on document-topic features.
pub fn classify<L: Ord + Clone>(
    features: &Array2<f64>,
    labels: &[L],
    config: &ClassifyConfig,
) -> Result<ClassificationReport, EvalError> {
    if features.nrows() != labels.len() {
        return Err(EvalError::InvalidInput(format!(
            "{} feature rows but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::InvalidInput("features contain non-finite values".into()));
    }
    let classes: Vec<L> = labels.iter().cloned().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    if classes.len() < 2 {
        return Err(EvalError::DegenerateLabels);
    }
    if config.folds < 2 || labels.len() < config.folds {
        return Err(EvalError::InvalidInput(format!(
            "need at least {} examples and 2 folds",
            config.folds.max(2)
        )));
    }
    let y: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label present"))
        .collect();
    let fold_of = stratified_folds(&y, config.folds, config.seed);

    let mut per_fold = Vec::with_capacity(config.folds);
    for fold in 0..config.folds {
        let train: Vec<usize> = (0..y.len()).filter(|&i| fold_of[i] != fold).collect();
        let test: Vec<usize> = (0..y.len()).filter(|&i| fold_of[i] == fold).collect();
        if test.is_empty() {
            continue;
        }
        let x_train = features.select(Axis(0), &train);
        let y_train: Vec<usize> = train.iter().map(|&i| y[i]).collect();
        let model = match config.kind {
            ClassifierKind::LogisticRegression => {
                LinearModel::fit_logistic(&x_train, &y_train, classes.len(), config.c, config.lr_max_iter)
            }
            ClassifierKind::LinearSvm => LinearModel::fit_hinge(
                &x_train,
                &y_train,
                classes.len(),
                config.svm_alpha,
                config.svm_epochs,
                config.seed.wrapping_add(fold as u64),
            ),
        };
        let correct = test
            .iter()
            .filter(|&&i| model.predict(features.slice(s![i, ..])) == y[i])
            .count();
        per_fold.push(correct as f64 / test.len() as f64);
    }
    Ok(ClassificationReport {
        accuracy_mean: per_fold.iter().sum::<f64>() / per_fold.len() as f64,
        accuracy_per_fold: per_fold,
    })
}
