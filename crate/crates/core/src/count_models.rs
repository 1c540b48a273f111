//! Count-based image models: the iid multinomial bag-of-words and the
//! multivariate Pólya (Dirichlet compound multinomial).

use ndarray::{Array1, ArrayView1, ArrayView2};

use crate::error::{Error, Result};
use crate::specfun::{digamma, ln_gamma};

/// Lower bound on Dirichlet parameters.
pub const ALPHA_FLOOR: f64 = 1e-6;
/// Bounds on the precision `Σ α` returned by moment matching.
pub const PRECISION_MIN: f64 = 1e-3;
pub const PRECISION_MAX: f64 = 1e6;

/// Per-word counts of one image. Soft (real-valued) counts are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct CountVector(Array1<f64>);

impl CountVector {
    pub fn new(counts: Array1<f64>) -> Result<Self> {
        if counts.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
            return Err(Error::Domain("counts must be finite and non-negative".into()));
        }
        Ok(CountVector(counts))
    }

    pub fn counts(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        crate::reduce::pairwise_sum(self.0.as_slice().expect("contiguous"))
    }
}

impl TryFrom<Vec<f64>> for CountVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        CountVector::new(Array1::from(v))
    }
}

/// Multinomial over `K` words, parameterized in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct MultinomialModel {
    pub gamma: Array1<f64>,
}

impl MultinomialModel {
    pub fn from_probabilities(pi: ArrayView1<f64>) -> Result<Self> {
        if pi.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::Domain("multinomial probabilities must be positive".into()));
        }
        Ok(MultinomialModel {
            gamma: pi.mapv(f64::ln),
        })
    }

    /// `π = softmax(γ)`.
    pub fn probabilities(&self) -> Array1<f64> {
        let max = self.gamma.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e = self.gamma.mapv(|g| (g - max).exp());
        let total = e.sum();
        e / total
    }
}

/// Dirichlet prior on per-image multinomials.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyaModel {
    pub alpha: Array1<f64>,
}

impl PolyaModel {
    pub fn new(alpha: Array1<f64>) -> Result<Self> {
        if alpha.is_empty() {
            return Err(Error::invalid("empty Dirichlet parameter vector"));
        }
        if alpha.iter().any(|a| !a.is_finite() || *a < ALPHA_FLOOR) {
            return Err(Error::Domain(format!(
                "Dirichlet parameters must be finite and >= {ALPHA_FLOOR}"
            )));
        }
        Ok(PolyaModel { alpha })
    }

    pub fn precision(&self) -> f64 {
        self.alpha.sum()
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Gradient of the multinomial log-likelihood w.r.t. `γ`: `n_k − N π_k`.
pub fn bow_fisher_score(model: &MultinomialModel, counts: &CountVector) -> Result<Array1<f64>> {
    check_len(model.gamma.len(), counts.len())?;
    let pi = model.probabilities();
    let n = counts.total();
    Ok(&counts.0 - &(pi * n))
}

/// Multinomial log-likelihood `Σ_k n_k ln π_k` of a word sequence.
pub fn bow_log_likelihood(model: &MultinomialModel, counts: &CountVector) -> Result<f64> {
    check_len(model.gamma.len(), counts.len())?;
    let pi = model.probabilities();
    Ok(counts
        .0
        .iter()
        .zip(pi.iter())
        .filter(|(n, _)| **n > 0.0)
        .map(|(n, p)| n * p.ln())
        .sum())
}

/// Log-probability of a word sequence with the given counts under the Pólya
/// model.
pub fn polya_log_likelihood(model: &PolyaModel, counts: &CountVector) -> Result<f64> {
    check_len(model.alpha.len(), counts.len())?;
    let a_hat = model.precision();
    let n = counts.total();
    let mut ll = ln_gamma(a_hat) - ln_gamma(n + a_hat);
    for (a, c) in model.alpha.iter().zip(counts.0.iter()) {
        if *c > 0.0 {
            ll += ln_gamma(c + a) - ln_gamma(*a);
        }
    }
    Ok(ll)
}

/// Gradient of [`polya_log_likelihood`] w.r.t. `α`:
/// `ψ(α_k + n_k) − ψ(α̂ + N) − ψ(α_k) + ψ(α̂)`.
pub fn polya_fisher_score(model: &PolyaModel, counts: &CountVector) -> Result<Array1<f64>> {
    check_len(model.alpha.len(), counts.len())?;
    let a_hat = model.precision();
    let n = counts.total();
    let shared = digamma(a_hat) - digamma(a_hat + n);
    Ok(Array1::from_shape_fn(model.alpha.len(), |k| {
        let (a, c) = (model.alpha[k], counts.0[k]);
        if c == 0.0 {
            shared
        } else {
            digamma(a + c) - digamma(a) + shared
        }
    }))
}

/// Result of a Dirichlet moment fit, with the precision before clamping.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletFit {
    pub model: PolyaModel,
    pub raw_precision: f64,
    pub clamped: bool,
}

/// Fits a Dirichlet to weighted proportion rows by matching moments.
///
/// With weighted mean `m` and weighted second moment `E[p₁²]` of the first
/// coordinate, the precision is `s = (m₁ − E[p₁²]) / (E[p₁²] − m₁²)`, clamped
/// to `[PRECISION_MIN, PRECISION_MAX]`, and `α = s·m` (floored at
/// `ALPHA_FLOOR`).
pub fn fit_dirichlet_moment_match(
    rows: ArrayView2<f64>,
    weights: ArrayView1<f64>,
) -> Result<DirichletFit> {
    let (m, k) = rows.dim();
    check_len(m, weights.len())?;
    if m == 0 || k == 0 {
        return Err(Error::invalid("no proportion rows to fit"));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Domain("weights must be non-negative".into()));
    }
    let w_total: f64 = weights.sum();
    if !(w_total > 0.0) {
        return Err(Error::Domain("weights are all zero".into()));
    }
    for (i, row) in rows.rows().into_iter().enumerate() {
        let sum: f64 = row.sum();
        if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("row {i} is not on the simplex")));
        }
    }
    let mean = rows.t().dot(&weights) / w_total;
    let second: f64 = rows
        .column(0)
        .iter()
        .zip(weights.iter())
        .map(|(p, w)| w * p * p)
        .sum::<f64>()
        / w_total;
    let m1 = mean[0];
    let var = second - m1 * m1;
    let raw = if var > 1e-15 * m1.max(1e-300) {
        (m1 - second) / var
    } else {
        f64::INFINITY
    };
    let clamped = !(PRECISION_MIN..=PRECISION_MAX).contains(&raw);
    if raw.is_infinite() {
        log::warn!("Dirichlet moment match: zero variance across rows, precision capped at {PRECISION_MAX}");
    }
    let s = raw.clamp(PRECISION_MIN, PRECISION_MAX);
    let alpha = mean.mapv(|p| (s * p).max(ALPHA_FLOOR));
    Ok(DirichletFit {
        model: PolyaModel { alpha },
        raw_precision: raw,
        clamped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferPoint {
    pub n: usize,
    /// `ψ(α_k + n)`.
    pub value: f64,
    /// `value` min-max rescaled to `[0, 1]` over the emitted range.
    pub rescaled: f64,
}

/// The count transformation `n ↦ ψ(α_k + n)` for `n = 0..=n_max`.
pub fn transfer_curve(model: &PolyaModel, k: usize, n_max: usize) -> Result<Vec<TransferPoint>> {
    if n_max < 1 {
        return Err(Error::invalid("n_max must be >= 1"));
    }
    let alpha = *model
        .alpha
        .get(k)
        .ok_or_else(|| Error::invalid(format!("word index {k} out of range")))?;
    let values: Vec<f64> = (0..=n_max).map(|n| digamma(alpha + n as f64)).collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(values
        .into_iter()
        .enumerate()
        .map(|(n, value)| TransferPoint {
            n,
            value,
            rescaled: if span > 0.0 { (value - lo) / span } else { 0.0 },
        })
        .collect())
}

/// Curve as CSV `n,value` (rescaled values).
pub fn transfer_curve_csv(points: &[TransferPoint]) -> String {
    let mut out = String::from("n,value\n");
    for p in points {
        out.push_str(&format!("{},{}\n", p.n, p.rescaled));
    }
    out
}
