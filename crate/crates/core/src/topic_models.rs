//! Topic models over visual-word counts: PLSA (maximum likelihood, exact
//! Fisher score after fold-in) and LDA (variational inference and the
//! gradient of the free energy w.r.t. the Dirichlet hyper-parameters).

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::count_models::{fit_dirichlet_moment_match, CountVector, ALPHA_FLOOR};
use crate::error::{Error, Result};
use crate::reduce::{par_blocks, pairwise_sum};
use crate::specfun::{digamma, ln_gamma};

/// Topic-word distributions plus the topic mixture used to seed fold-in.
#[derive(Debug, Clone, PartialEq)]
pub struct PlsaModel {
    /// `T × K`, rows on the simplex.
    pub topic_word: Array2<f64>,
    pub doc_topic_init: Array1<f64>,
}

impl PlsaModel {
    pub fn new(topic_word: Array2<f64>, doc_topic_init: Array1<f64>) -> Result<Self> {
        if topic_word.nrows() == 0 || topic_word.nrows() != doc_topic_init.len() {
            return Err(Error::invalid("inconsistent PLSA shapes"));
        }
        for row in topic_word.rows().into_iter().chain(std::iter::once(doc_topic_init.view())) {
            if row.iter().any(|p| !(*p >= 0.0)) || (row.sum() - 1.0).abs() > 1e-9 {
                return Err(Error::Domain("PLSA distributions must lie on the simplex".into()));
            }
        }
        Ok(PlsaModel {
            topic_word,
            doc_topic_init,
        })
    }

    pub fn n_topics(&self) -> usize {
        self.topic_word.nrows()
    }

    pub fn vocabulary_size(&self) -> usize {
        self.topic_word.ncols()
    }
}

#[derive(Debug, Clone)]
pub struct PlsaOptions {
    pub topics: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
}

impl PlsaOptions {
    pub fn new(topics: usize, seed: u64) -> Self {
        PlsaOptions {
            topics,
            seed,
            tol: 1e-7,
            max_iter: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlsaFit {
    pub model: PlsaModel,
    /// Per-document topic mixtures `θ_d`, `M × T`.
    pub doc_topics: Array2<f64>,
    /// Corpus log-likelihood of each evaluated iterate.
    pub trace: Vec<f64>,
    pub reseeded: Vec<usize>,
    pub converged: bool,
}

/// Per-document E-step: returns `(log-likelihood, new θ, expected topic-word
/// counts)`.
fn plsa_doc_step(
    topic_word: ArrayView2<f64>,
    theta: ArrayView1<f64>,
    counts: ArrayView1<f64>,
) -> (f64, Array1<f64>, Array2<f64>) {
    let (t, k) = topic_word.dim();
    let mut acc = Array2::zeros((t, k));
    let mut new_theta = Array1::zeros(t);
    let mut ll = 0.0;
    let n: f64 = counts.sum();
    for w in 0..k {
        let c = counts[w];
        if c <= 0.0 {
            continue;
        }
        let p: f64 = (0..t).map(|z| theta[z] * topic_word[[z, w]]).sum();
        if p <= 0.0 {
            ll = f64::NEG_INFINITY;
            continue;
        }
        ll += c * p.ln();
        for z in 0..t {
            let r = c * theta[z] * topic_word[[z, w]] / p;
            acc[[z, w]] = r;
            new_theta[z] += r;
        }
    }
    if n > 0.0 {
        new_theta /= n;
    } else {
        new_theta.assign(&theta);
    }
    (ll, new_theta, acc)
}

/// Trains PLSA on an `M × K` count matrix by EM.
pub fn train_plsa(counts: ArrayView2<f64>, opts: &PlsaOptions) -> Result<PlsaFit> {
    let (m, k) = counts.dim();
    let t = opts.topics;
    if t == 0 {
        return Err(Error::invalid("number of topics must be >= 1"));
    }
    if m == 0 || k == 0 {
        return Err(Error::invalid("empty count matrix"));
    }
    if counts.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) {
        return Err(Error::Domain("counts must be finite and non-negative".into()));
    }
    let global = counts.sum_axis(Axis(0));
    let total = global.sum();
    if !(total > 0.0) {
        return Err(Error::Domain("corpus has no tokens".into()));
    }
    // Smoothed global distribution keeps every word reachable from every topic.
    let global = global.mapv(|c| (c + 1e-3) / (total + 1e-3 * k as f64));

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let perturbed = |rng: &mut ChaCha8Rng| -> Array1<f64> {
        let row = global.mapv(|g| g * (1.0 + 0.5 * (2.0 * rng.random::<f64>() - 1.0)));
        let s = row.sum();
        row / s
    };
    let mut topic_word = Array2::zeros((t, k));
    for z in 0..t {
        topic_word.row_mut(z).assign(&perturbed(&mut rng));
    }
    let mut theta = Array2::from_elem((m, t), 1.0 / t as f64);

    let mut trace = Vec::new();
    let mut reseeded = Vec::new();
    let mut converged = false;
    for iter in 0..opts.max_iter {
        let steps: Vec<(f64, Array1<f64>, Array2<f64>)> = (0..m)
            .into_par_iter()
            .map(|d| plsa_doc_step(topic_word.view(), theta.row(d), counts.row(d)))
            .collect();
        let ll = pairwise_sum(&steps.iter().map(|s| s.0).collect::<Vec<_>>());
        let prev = trace.last().copied();
        trace.push(ll);
        if let Some(prev) = prev {
            if ll - prev <= opts.tol * f64::abs(prev) {
                converged = true;
                break;
            }
        }
        let mut parts = Vec::with_capacity(m);
        for (d, (_, th, acc)) in steps.into_iter().enumerate() {
            theta.row_mut(d).assign(&th);
            parts.push(acc);
        }
        let acc = crate::reduce::tree_reduce(parts).expect("m > 0");
        let mut empty = false;
        for z in 0..t {
            let mass = acc.row(z).sum();
            if mass < 1e-12 {
                log::info!("PLSA iteration {iter}: topic {z} is empty, re-seeding");
                topic_word.row_mut(z).assign(&perturbed(&mut rng));
                empty = true;
            } else {
                topic_word.row_mut(z).assign(&(&acc.row(z) / mass));
            }
        }
        if empty {
            reseeded.push(iter);
        }
    }
    let mut init = theta.sum_axis(Axis(0));
    init /= init.sum();
    Ok(PlsaFit {
        model: PlsaModel {
            topic_word,
            doc_topic_init: init,
        },
        doc_topics: theta,
        trace,
        reseeded,
        converged,
    })
}

/// Fold-in result: the per-image topic mixture with topics frozen.
#[derive(Debug, Clone)]
pub struct FoldIn {
    pub theta: Array1<f64>,
    pub log_likelihood: f64,
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// Estimates `θ` for one image by EM with the topics frozen, starting from
/// `doc_topic_init`.
///
/// EM contracts linearly, often slowly, so a small step does not mean `θ`
/// is close to the fixed point. Iteration stops once the distance to the
/// fixed point extrapolated from the last two steps is below `tol`.
pub fn fold_in(model: &PlsaModel, counts: &CountVector, tol: f64, max_iter: usize) -> Result<FoldIn> {
    if counts.len() != model.vocabulary_size() {
        return Err(Error::DimensionMismatch {
            expected: model.vocabulary_size(),
            got: counts.len(),
        });
    }
    let mut theta = model.doc_topic_init.clone();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut prev_delta = f64::INFINITY;
    for _ in 0..max_iter {
        let (ll, next, _) = plsa_doc_step(model.topic_word.view(), theta.view(), counts.counts());
        trace.push(ll);
        let delta = next
            .iter()
            .zip(theta.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        theta = next;
        let rate = delta / prev_delta;
        let remaining = if rate < 1.0 { delta * rate / (1.0 - rate) } else { f64::INFINITY };
        if delta == 0.0 || (delta < tol && remaining < tol) {
            converged = true;
            break;
        }
        prev_delta = delta;
    }
    let log_likelihood = plsa_log_likelihood(model, theta.view(), counts);
    Ok(FoldIn {
        theta,
        log_likelihood,
        trace,
        converged,
    })
}

/// `Σ_k n_k ln Σ_t θ_t π_tk`.
pub fn plsa_log_likelihood(model: &PlsaModel, theta: ArrayView1<f64>, counts: &CountVector) -> f64 {
    counts
        .counts()
        .iter()
        .enumerate()
        .filter(|(_, c)| **c > 0.0)
        .map(|(w, c)| c * theta.dot(&model.topic_word.column(w)).ln())
        .sum()
}

/// PLSA Fisher score at a given `θ`: gradients w.r.t. the softmax
/// parameters of `θ` (length `T`) followed by those of each topic
/// (`T × K`, row-major).
pub fn plsa_fisher_score_at(
    model: &PlsaModel,
    theta: ArrayView1<f64>,
    counts: &CountVector,
) -> Result<Array1<f64>> {
    let (t, k) = model.topic_word.dim();
    if counts.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: counts.len(),
        });
    }
    let n = counts.total();
    // Expected topic-word counts n_k r_kt.
    let mut assigned = Array2::<f64>::zeros((t, k));
    for w in 0..k {
        let c = counts.counts()[w];
        if c <= 0.0 {
            continue;
        }
        let p = theta.dot(&model.topic_word.column(w));
        for z in 0..t {
            assigned[[z, w]] = c * theta[z] * model.topic_word[[z, w]] / p;
        }
    }
    let topic_mass = assigned.sum_axis(Axis(1));
    let mut out = Array1::zeros(t + t * k);
    for z in 0..t {
        out[z] = topic_mass[z] - n * theta[z];
        for w in 0..k {
            out[t + z * k + w] = assigned[[z, w]] - model.topic_word[[z, w]] * topic_mass[z];
        }
    }
    Ok(out)
}

/// PLSA Fisher score after folding in `θ` to tolerance `1e-8`.
pub fn plsa_fisher_score(model: &PlsaModel, counts: &CountVector) -> Result<Array1<f64>> {
    let fold = fold_in(model, counts, 1e-8, 100_000)?;
    plsa_fisher_score_at(model, fold.theta.view(), counts)
}

/// Dirichlet priors on per-image topic mixtures (`α`, length `T`) and on
/// per-image topic-word distributions (`η`, `T × K`).
#[derive(Debug, Clone, PartialEq)]
pub struct LdaModel {
    pub alpha: Array1<f64>,
    pub eta: Array2<f64>,
}

impl LdaModel {
    pub fn new(alpha: Array1<f64>, eta: Array2<f64>) -> Result<Self> {
        if alpha.is_empty() || eta.nrows() != alpha.len() || eta.ncols() == 0 {
            return Err(Error::invalid("inconsistent LDA shapes"));
        }
        if alpha.iter().chain(eta.iter()).any(|v| !v.is_finite() || *v < ALPHA_FLOOR) {
            return Err(Error::Domain(format!(
                "LDA hyper-parameters must be finite and >= {ALPHA_FLOOR}"
            )));
        }
        Ok(LdaModel { alpha, eta })
    }

    pub fn n_topics(&self) -> usize {
        self.alpha.len()
    }

    pub fn vocabulary_size(&self) -> usize {
        self.eta.ncols()
    }
}

/// Variational posterior of one image under LDA.
#[derive(Debug, Clone, PartialEq)]
pub struct LdaPosterior {
    pub alpha_star: Array1<f64>,
    pub eta_star: Array2<f64>,
    /// `K × T`: topic assignment of every occurrence of word `k`.
    pub q_word_topic: Array2<f64>,
    pub bound: f64,
    /// Bound after each sweep.
    pub trace: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct LdaOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LdaOptions {
    fn default() -> Self {
        LdaOptions {
            tol: 1e-7,
            max_iter: 200,
        }
    }
}

fn lda_parameters(
    model: &LdaModel,
    counts: ArrayView1<f64>,
    q: ArrayView2<f64>,
) -> (Array1<f64>, Array2<f64>) {
    let (t, k) = model.eta.dim();
    let mut alpha_star = model.alpha.clone();
    let mut eta_star = model.eta.clone();
    for w in 0..k {
        let c = counts[w];
        if c == 0.0 {
            continue;
        }
        for z in 0..t {
            let v = c * q[[w, z]];
            alpha_star[z] += v;
            eta_star[[z, w]] += v;
        }
    }
    (alpha_star, eta_star)
}

fn dirichlet_expected_logs(params: ArrayView1<f64>) -> Array1<f64> {
    let total = digamma(params.sum());
    params.mapv(|a| digamma(a) - total)
}

fn ln_dirichlet_norm(params: ArrayView1<f64>) -> f64 {
    ln_gamma(params.sum()) - params.iter().map(|a| ln_gamma(*a)).sum::<f64>()
}

/// Free energy `E_q[ln p(w, θ, π, z)] + H(q)` at an arbitrary variational
/// posterior `(α*, η*, q)`.
pub fn lda_bound(
    model: &LdaModel,
    counts: &CountVector,
    alpha_star: ArrayView1<f64>,
    eta_star: ArrayView2<f64>,
    q_word_topic: ArrayView2<f64>,
) -> f64 {
    let (t, k) = model.eta.dim();
    let n = counts.counts();
    let e_ln_theta = dirichlet_expected_logs(alpha_star);
    let mut bound = ln_dirichlet_norm(model.alpha.view()) - ln_dirichlet_norm(alpha_star);
    for z in 0..t {
        bound += (model.alpha[z] - alpha_star[z]) * e_ln_theta[z];
    }
    for z in 0..t {
        let e_ln_pi = dirichlet_expected_logs(eta_star.row(z));
        bound += ln_dirichlet_norm(model.eta.row(z)) - ln_dirichlet_norm(eta_star.row(z));
        for w in 0..k {
            bound += (model.eta[[z, w]] - eta_star[[z, w]]) * e_ln_pi[w];
            let c = n[w];
            let qz = q_word_topic[[w, z]];
            if c > 0.0 && qz > 0.0 {
                bound += c * qz * (e_ln_theta[z] + e_ln_pi[w] - qz.ln());
            }
        }
    }
    bound
}

/// Coordinate-ascent variational inference for one image.
pub fn lda_infer(model: &LdaModel, counts: &CountVector, opts: LdaOptions) -> Result<LdaPosterior> {
    let (t, k) = model.eta.dim();
    if counts.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: counts.len(),
        });
    }
    let n = counts.counts();
    let mut q = Array2::from_elem((k, t), 1.0 / t as f64);
    let mut trace = Vec::new();
    let mut converged = false;
    let mut best: Option<(f64, Array2<f64>)> = None;
    for _ in 0..opts.max_iter.max(1) {
        let (alpha_star, eta_star) = lda_parameters(model, n, q.view());
        let bound = lda_bound(model, counts, alpha_star.view(), eta_star.view(), q.view());
        let prev = trace.last().copied();
        trace.push(bound);
        if best.as_ref().is_none_or(|(b, _)| bound >= *b) {
            best = Some((bound, q.clone()));
        }
        if let Some(prev) = prev {
            if (bound - prev).abs() <= opts.tol * f64::abs(prev).max(1.0) {
                converged = true;
                break;
            }
        }
        let e_ln_theta = dirichlet_expected_logs(alpha_star.view());
        let e_ln_pi: Vec<Array1<f64>> = (0..t)
            .map(|z| dirichlet_expected_logs(eta_star.row(z)))
            .collect();
        let mut logits = vec![0.0; t];
        for w in 0..k {
            for z in 0..t {
                logits[z] = e_ln_theta[z] + e_ln_pi[z][w];
            }
            let lse = crate::gmm::log_sum_exp(&logits);
            for z in 0..t {
                q[[w, z]] = (logits[z] - lse).exp();
            }
        }
    }
    if !converged {
        log::debug!("LDA inference did not converge in {} sweeps", opts.max_iter);
        q = best.expect("at least one sweep").1;
    }
    let (alpha_star, eta_star) = lda_parameters(model, n, q.view());
    let bound = lda_bound(model, counts, alpha_star.view(), eta_star.view(), q.view());
    Ok(LdaPosterior {
        alpha_star,
        eta_star,
        q_word_topic: q,
        bound,
        trace,
        converged,
    })
}

/// `[∂F/∂α ; ∂F/∂η (row-major)]` at the variational posterior.
pub fn lda_fisher_score(model: &LdaModel, post: &LdaPosterior) -> Array1<f64> {
    let (t, k) = model.eta.dim();
    let mut out = Array1::zeros(t + t * k);
    let grad_alpha =
        dirichlet_expected_logs(post.alpha_star.view()) - dirichlet_expected_logs(model.alpha.view());
    out.slice_mut(s![..t]).assign(&grad_alpha);
    for z in 0..t {
        let g = dirichlet_expected_logs(post.eta_star.row(z))
            - dirichlet_expected_logs(model.eta.row(z));
        out.slice_mut(s![t + z * k..t + (z + 1) * k]).assign(&g);
    }
    out
}

/// LDA priors fitted from a trained PLSA model.
#[derive(Debug, Clone)]
pub struct LdaFromPlsa {
    pub model: LdaModel,
    pub alpha_clamped: bool,
    pub eta_clamped: Vec<bool>,
}

/// Fits `α` by moment matching on the per-document topic mixtures and each
/// `η_t` by moment matching on the per-document topic-word proportions,
/// weighting documents by their soft token mass in topic `t`.
pub fn fit_lda_from_plsa(
    plsa: &PlsaModel,
    doc_topics: ArrayView2<f64>,
    counts: ArrayView2<f64>,
) -> Result<LdaFromPlsa> {
    let (t, k) = plsa.topic_word.dim();
    let m = doc_topics.nrows();
    if doc_topics.ncols() != t {
        return Err(Error::DimensionMismatch {
            expected: t,
            got: doc_topics.ncols(),
        });
    }
    if counts.dim() != (m, k) {
        return Err(Error::invalid(format!(
            "count matrix must be {m}x{k}, got {:?}",
            counts.dim()
        )));
    }
    let alpha_fit = fit_dirichlet_moment_match(doc_topics, Array1::ones(m).view())?;

    // Per-document expected topic-word counts, in document order.
    let per_doc: Vec<Array2<f64>> = (0..m)
        .into_par_iter()
        .map(|d| plsa_doc_step(plsa.topic_word.view(), doc_topics.row(d), counts.row(d)).2)
        .collect();
    let mut eta = Array2::zeros((t, k));
    let mut eta_clamped = Vec::with_capacity(t);
    for z in 0..t {
        let mut rows = Vec::new();
        let mut weights = Vec::new();
        for acc in &per_doc {
            let mass = acc.row(z).sum();
            if mass > 0.0 {
                rows.extend(acc.row(z).iter().map(|v| v / mass));
                weights.push(mass);
            }
        }
        if weights.is_empty() {
            log::warn!("topic {z} has no mass in any document, using its PLSA distribution");
            eta.row_mut(z)
                .assign(&plsa.topic_word.row(z).mapv(|p| p.max(ALPHA_FLOOR)));
            eta_clamped.push(true);
            continue;
        }
        let rows = Array2::from_shape_vec((weights.len(), k), rows).expect("shape");
        let fit = fit_dirichlet_moment_match(rows.view(), Array1::from(weights).view())?;
        eta.row_mut(z).assign(&fit.model.alpha);
        eta_clamped.push(fit.clamped);
    }
    Ok(LdaFromPlsa {
        model: LdaModel::new(alpha_fit.model.alpha, eta)?,
        alpha_clamped: alpha_fit.clamped,
        eta_clamped,
    })
}

/// Token counts of a corpus as the rows of an `M × K` matrix.
pub fn count_matrix(rows: &[CountVector]) -> Result<Array2<f64>> {
    let k = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut out = Array2::zeros((rows.len(), k));
    for (i, r) in rows.iter().enumerate() {
        if r.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                got: r.len(),
            });
        }
        out.row_mut(i).assign(&r.counts());
    }
    Ok(out)
}

/// Sums over documents in parallel with a deterministic reduction.
pub fn corpus_bound(model: &LdaModel, docs: &[CountVector], opts: LdaOptions) -> Result<f64> {
    let bounds: Vec<f64> = docs
        .par_iter()
        .map(|c| lda_infer(model, c, opts).map(|p| p.bound))
        .collect::<Result<_>>()?;
    Ok(par_blocks(bounds.len(), 64, |r| pairwise_sum(&bounds[r])).unwrap_or(0.0))
}
