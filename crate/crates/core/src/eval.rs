//! One-vs-rest linear SVMs, VOC 11-point interpolated AP, accuracy, and
//! paired bootstrap comparisons of two systems.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Relative duality gap at which dual coordinate descent stops.
pub const GAP_TOL: f64 = 1e-4;
const MAX_EPOCHS: usize = 20_000;

/// Ground truth for `n` images and `C` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    /// `n × C` relevance matrix.
    pub matrix: Array2<bool>,
    /// Every image has exactly one class.
    pub single: bool,
}

impl Labels {
    pub fn single_label(classes: &[usize], n_classes: usize) -> Result<Self> {
        let mut matrix = Array2::from_elem((classes.len(), n_classes), false);
        for (i, &c) in classes.iter().enumerate() {
            if c >= n_classes {
                return Err(Error::invalid(format!("class {c} out of range")));
            }
            matrix[[i, c]] = true;
        }
        Ok(Labels { matrix, single: true })
    }

    pub fn multi_label(matrix: Array2<bool>) -> Self {
        Labels { matrix, single: false }
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn n_classes(&self) -> usize {
        self.matrix.ncols()
    }

    fn select(&self, rows: &[usize]) -> Labels {
        Labels {
            matrix: self.matrix.select(Axis(0), rows),
            single: self.single,
        }
    }

    /// Class index of every image for single-label data.
    pub fn classes(&self) -> Option<Vec<usize>> {
        self.single.then(|| {
            self.matrix
                .rows()
                .into_iter()
                .map(|r| r.iter().position(|v| *v).unwrap_or(0))
                .collect()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Mean over classes of the 11-point interpolated AP.
    Map11,
    /// Mean over classes of the per-class accuracy of argmax predictions.
    Accuracy,
}

/// Binary hinge-loss SVM `min ½‖w‖² + C Σ max(0, 1 − y(w·x + b))` with the
/// bias learned as the weight of a constant feature.
#[derive(Debug, Clone, PartialEq)]
pub struct BinarySvm {
    pub weights: Array1<f64>,
    pub bias: f64,
    pub primal: f64,
    pub dual: f64,
    /// `½‖w‖² − Σα` after every epoch; coordinate descent never increases it.
    pub dual_trace: Vec<f64>,
    pub converged: bool,
}

fn primal_objective(x: ArrayView2<f64>, y: &[f64], w: ArrayView1<f64>, bias: f64, c: f64) -> f64 {
    let loss: f64 = x
        .rows()
        .into_iter()
        .zip(y)
        .map(|(r, yi)| (1.0 - yi * (r.dot(&w) + bias)).max(0.0))
        .sum();
    0.5 * (w.dot(&w) + bias * bias) + c * loss
}

/// Dual coordinate descent on the box-constrained dual, visiting the
/// coordinates in a seeded order every epoch.
pub fn train_binary_svm(x: ArrayView2<f64>, y: &[f64], c: f64, seed: u64) -> Result<BinarySvm> {
    let (n, d) = x.dim();
    if y.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: y.len() });
    }
    if y.iter().any(|v| *v != 1.0 && *v != -1.0) {
        return Err(Error::invalid("binary labels must be ±1"));
    }
    if !(c > 0.0) {
        return Err(Error::invalid("C must be positive"));
    }
    let sq_norms: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r) + 1.0).collect();
    let mut alpha = vec![0.0; n];
    let mut w = Array1::<f64>::zeros(d);
    let mut bias = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dual_trace = Vec::new();
    let mut converged = false;
    let (mut primal, mut dual) = (0.0, 0.0);
    for _ in 0..MAX_EPOCHS {
        order.shuffle(&mut rng);
        for &i in &order {
            let xi = x.row(i);
            let g = y[i] * (xi.dot(&w) + bias) - 1.0;
            let a_old = alpha[i];
            let a_new = (a_old - g / sq_norms[i]).clamp(0.0, c);
            let delta = (a_new - a_old) * y[i];
            if delta != 0.0 {
                alpha[i] = a_new;
                w.scaled_add(delta, &xi);
                bias += delta;
            }
        }
        let reg = 0.5 * (w.dot(&w) + bias * bias);
        let dual_min = reg - alpha.iter().sum::<f64>();
        dual_trace.push(dual_min);
        primal = primal_objective(x, y, w.view(), bias, c);
        dual = -dual_min;
        if primal - dual <= GAP_TOL * primal.abs().max(1.0) {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("SVM stopped after {MAX_EPOCHS} epochs with gap {}", primal - dual);
    }
    Ok(BinarySvm {
        weights: w,
        bias,
        primal,
        dual,
        dual_trace,
        converged,
    })
}

/// One-vs-rest linear classifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    /// `C × L` weights.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    /// Regularization constant selected by cross-validation.
    pub c: f64,
}

impl LinearModel {
    /// `n × C` decision values.
    pub fn decision(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.weights.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.weights.ncols(),
                got: x.ncols(),
            });
        }
        Ok(x.dot(&self.weights.t()) + &self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct SvmOptions {
    pub c_grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for SvmOptions {
    fn default() -> Self {
        SvmOptions {
            c_grid: (-3..=3).map(|e| 10f64.powi(e)).collect(),
            folds: 3,
            seed: 0,
        }
    }
}

fn train_one_vs_rest(x: ArrayView2<f64>, labels: &Labels, c: f64, seed: u64) -> Result<LinearModel> {
    let classes: Vec<BinarySvm> = (0..labels.n_classes())
        .into_par_iter()
        .map(|k| {
            let y: Vec<f64> = labels
                .matrix
                .column(k)
                .iter()
                .map(|v| if *v { 1.0 } else { -1.0 })
                .collect();
            train_binary_svm(x, &y, c, seed.wrapping_add(k as u64))
        })
        .collect::<Result<_>>()?;
    let mut weights = Array2::zeros((classes.len(), x.ncols()));
    let mut bias = Array1::zeros(classes.len());
    for (k, svm) in classes.into_iter().enumerate() {
        weights.row_mut(k).assign(&svm.weights);
        bias[k] = svm.bias;
    }
    Ok(LinearModel { weights, bias, c })
}

/// Trains one-vs-rest SVMs, selecting `C` by k-fold validation of `metric`
/// (ties go to the smaller `C`) and retraining on all data.
pub fn train_linear_svm(x: ArrayView2<f64>, labels: &Labels, metric: Metric, opts: &SvmOptions) -> Result<LinearModel> {
    let n = x.nrows();
    if labels.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: labels.len() });
    }
    let represented = labels
        .matrix
        .columns()
        .into_iter()
        .filter(|c| c.iter().any(|v| *v))
        .count();
    if represented < 2 {
        return Err(Error::invalid("at least two classes must be represented"));
    }
    if opts.c_grid.is_empty() {
        return Err(Error::invalid("empty C grid"));
    }
    let mut grid = opts.c_grid.clone();
    grid.sort_by(f64::total_cmp);
    let folds = opts.folds.clamp(2, n.max(2));
    let best_c = if grid.len() == 1 || n < folds {
        grid[0]
    } else {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
        let mut fold_of = vec![0; n];
        for (pos, &i) in perm.iter().enumerate() {
            fold_of[i] = pos % folds;
        }
        let mut best = (f64::NEG_INFINITY, grid[0]);
        for &c in &grid {
            let mut fold_scores = Vec::with_capacity(folds);
            for f in 0..folds {
                let test: Vec<usize> = perm.iter().copied().skip(f).step_by(folds).collect();
                let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
                let model = train_one_vs_rest(x.select(Axis(0), &train).view(), &labels.select(&train), c, opts.seed)?;
                let scores = model.decision(x.select(Axis(0), &test).view())?;
                if let Ok(report) = evaluate(scores.view(), &labels.select(&test), metric) {
                    fold_scores.push(report.mean);
                }
            }
            let score = if fold_scores.is_empty() {
                f64::NEG_INFINITY
            } else {
                fold_scores.iter().sum::<f64>() / fold_scores.len() as f64
            };
            log::debug!("C={c}: validation {score}");
            if score > best.0 {
                best = (score, c);
            }
        }
        best.1
    };
    train_one_vs_rest(x, labels, best_c, opts.seed)
}

/// VOC 2007 11-point interpolated average precision.
pub fn average_precision_interpolated(scores: ArrayView1<f64>, relevant: ArrayView1<bool>) -> Result<f64> {
    if scores.len() != relevant.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            got: relevant.len(),
        });
    }
    let n_rel = relevant.iter().filter(|r| **r).count();
    if n_rel == 0 {
        return Err(Error::invalid("average precision needs at least one relevant item"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // (recall, precision) after every rank.
    let mut hits = 0usize;
    let mut curve = Vec::with_capacity(order.len());
    for (rank, &i) in order.iter().enumerate() {
        if relevant[i] {
            hits += 1;
        }
        curve.push((hits as f64 / n_rel as f64, hits as f64 / (rank + 1) as f64));
    }
    let mut ap = 0.0;
    for t in 0..=10 {
        let threshold = t as f64 / 10.0;
        let p = curve
            .iter()
            .filter(|(r, _)| *r >= threshold - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        ap += p;
    }
    Ok(ap / 11.0)
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: predicted.len(),
        });
    }
    if truth.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Index of the largest entry of every row (ties go to the lower index).
pub fn argmax_rows(scores: ArrayView2<f64>) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|r| {
            let mut best = 0;
            for (k, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Per-class metric; `None` for classes without relevant images.
    pub per_class: Vec<Option<f64>>,
    /// Mean over the classes that have a value.
    pub mean: f64,
}

/// Per-class AP (or accuracy restricted to the class's images) and their mean.
pub fn evaluate(scores: ArrayView2<f64>, labels: &Labels, metric: Metric) -> Result<EvalReport> {
    if scores.dim() != labels.matrix.dim() {
        return Err(Error::invalid(format!(
            "scores {:?} do not match labels {:?}",
            scores.dim(),
            labels.matrix.dim()
        )));
    }
    let per_class: Vec<Option<f64>> = match metric {
        Metric::Map11 => (0..labels.n_classes())
            .map(|k| average_precision_interpolated(scores.column(k), labels.matrix.column(k)).ok())
            .collect(),
        Metric::Accuracy => {
            let truth = labels
                .classes()
                .ok_or_else(|| Error::invalid("accuracy needs single-label data"))?;
            let predicted = argmax_rows(scores);
            (0..labels.n_classes())
                .map(|k| {
                    let idx: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == k).collect();
                    let p: Vec<usize> = idx.iter().map(|&i| predicted[i]).collect();
                    let t: Vec<usize> = idx.iter().map(|&i| truth[i]).collect();
                    accuracy(&p, &t).ok()
                })
                .collect()
        }
    };
    let values: Vec<f64> = per_class.iter().flatten().copied().collect();
    if values.is_empty() {
        return Err(Error::invalid("no class has relevant images"));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(EvalReport { per_class, mean })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    /// Metric of system A minus metric of system B on the full test set.
    pub delta: f64,
    /// Percentile 95% interval of the resampled differences.
    pub ci: (f64, f64),
    /// The interval contains 0.
    pub equivalent: bool,
}

/// Paired bootstrap over test images of the metric difference between two
/// systems scored on the same images.
pub fn bootstrap_compare(
    scores_a: ArrayView2<f64>,
    scores_b: ArrayView2<f64>,
    labels: &Labels,
    metric: Metric,
    iters: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    if iters < 100 {
        return Err(Error::invalid("bootstrap needs at least 100 resamples"));
    }
    if scores_a.dim() != scores_b.dim() {
        return Err(Error::invalid("both systems must score the same items"));
    }
    let delta = evaluate(scores_a, labels, metric)?.mean - evaluate(scores_b, labels, metric)?.mean;
    let n = labels.len();
    let mut deltas: Vec<f64> = (0..iters)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let l = labels.select(&idx);
            let a = evaluate(scores_a.select(Axis(0), &idx).view(), &l, metric);
            let b = evaluate(scores_b.select(Axis(0), &idx).view(), &l, metric);
            match (a, b) {
                (Ok(a), Ok(b)) => Some(a.mean - b.mean),
                _ => None,
            }
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    if deltas.is_empty() {
        return Err(Error::invalid("no bootstrap resample could be evaluated"));
    }
    deltas.sort_by(f64::total_cmp);
    let quantile = |q: f64| {
        let pos = q * (deltas.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        deltas[lo] + (deltas[hi] - deltas[lo]) * (pos - lo as f64)
    };
    let ci = (quantile(0.025), quantile(0.975));
    Ok(BootstrapResult {
        delta,
        ci,
        equivalent: ci.0 <= 0.0 && 0.0 <= ci.1,
    })
}
