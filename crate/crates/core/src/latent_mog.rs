//! Latent mixture of Gaussians: every image has its own MoG whose parameters
//! are drawn from a Dirichlet prior (mixing weights) and per-dimension
//! Normal-Gamma priors (means and precisions).
//!
//! The log-likelihood is intractable, so inference maximizes the variational
//! free energy `F` under a posterior that factorizes over the MoG parameters
//! and the descriptor-to-component assignments. The image representation is
//! `∂F/∂(α, m, β, a, b)`, a vector of length `K(1 + 4D)`.
//!
//! The iid MoG Fisher score (`K(1 + 2D)`) lives here as well since it shares
//! the sufficient statistics.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;

use crate::count_models::{fit_dirichlet_moment_match, ALPHA_FLOOR};
use crate::descriptors::DescriptorSet;
use crate::encoder::LayoutBlock;
use crate::error::{Error, Result};
use crate::gmm::{log_sum_exp, sufficient_stats, GaussianMixture, Responsibilities, SufficientStats};
use crate::reduce::pairwise_sum;
use crate::specfun::{digamma, ln_gamma};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Lower bound on every positive hyper-parameter.
pub const PARAM_FLOOR: f64 = 1e-6;
/// Upper bound used when moment matching sees zero variance.
pub const PARAM_CAP: f64 = 1e6;

/// Hyper-parameters of the latent MoG.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMogModel {
    /// Dirichlet parameters of the mixing weights, length `K`.
    pub alpha: Array1<f64>,
    /// Normal-Gamma parameters, each `K × D`.
    pub m: Array2<f64>,
    pub beta: Array2<f64>,
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl LatentMogModel {
    pub fn new(
        alpha: Array1<f64>,
        m: Array2<f64>,
        beta: Array2<f64>,
        a: Array2<f64>,
        b: Array2<f64>,
    ) -> Result<Self> {
        let k = alpha.len();
        let dim = m.dim();
        if k == 0 || dim.0 != k || beta.dim() != dim || a.dim() != dim || b.dim() != dim {
            return Err(Error::invalid("inconsistent latent MoG shapes"));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("prior means must be finite".into()));
        }
        let positive = alpha.iter().chain(&beta).chain(&a).chain(&b);
        if positive.clone().any(|v| !v.is_finite() || *v < PARAM_FLOOR) {
            return Err(Error::Domain(format!(
                "latent MoG hyper-parameters must be finite and >= {PARAM_FLOOR}"
            )));
        }
        Ok(LatentMogModel { alpha, m, beta, a, b })
    }

    pub fn n_components(&self) -> usize {
        self.alpha.len()
    }

    pub fn dim(&self) -> usize {
        self.m.ncols()
    }

    /// Length of the Fisher vector, `K(1 + 4D)`.
    pub fn score_len(&self) -> usize {
        self.n_components() * (1 + 4 * self.dim())
    }
}

/// Parameters of the variational posterior on one image's MoG.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    pub alpha_star: Array1<f64>,
    pub m_star: Array2<f64>,
    pub beta_star: Array2<f64>,
    pub a_star: Array2<f64>,
    pub b_star: Array2<f64>,
}

/// Variational posterior of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMogPosterior {
    pub params: PosteriorParams,
    /// Component assignments; `None` when inference ran on frozen statistics.
    pub resp: Option<Responsibilities>,
    pub stats: SufficientStats,
    /// Free energy at the returned posterior. With frozen statistics the
    /// assignment entropy is not known and is left out.
    pub bound: f64,
    pub trace: Vec<f64>,
    pub converged: bool,
}

/// Normal-Gamma prior (or posterior) of one `(component, dimension)` pair.
#[derive(Debug, Clone, Copy, PartialEq)]
struct NormalGamma {
    m: f64,
    beta: f64,
    a: f64,
    b: f64,
}

impl NormalGamma {
    /// Conjugate update with soft statistics.
    fn update(self, s0: f64, s1: f64, s2: f64) -> NormalGamma {
        let beta = self.beta + s0;
        let m = (s1 + self.beta * self.m) / beta;
        let a = self.a + 0.5 * s0;
        let b = if s0 > 1e-12 {
            // b + ½(βm² + s2) − ½β*m*², rearranged to avoid cancellation.
            let mean = s1 / s0;
            let scatter = (s2 - s1 * mean).max(0.0);
            let shift = mean - self.m;
            self.b + 0.5 * scatter + 0.5 * self.beta * s0 / beta * shift * shift
        } else {
            self.b + 0.5 * (self.beta * self.m * self.m + s2) - 0.5 * beta * m * m
        };
        NormalGamma {
            m,
            beta,
            a,
            b: b.max(f64::MIN_POSITIVE),
        }
    }

    fn e_lambda(self) -> f64 {
        self.a / self.b
    }

    fn e_ln_lambda(self) -> f64 {
        digamma(self.a) - self.b.ln()
    }
}

impl LatentMogModel {
    fn prior(&self, k: usize, d: usize) -> NormalGamma {
        NormalGamma {
            m: self.m[[k, d]],
            beta: self.beta[[k, d]],
            a: self.a[[k, d]],
            b: self.b[[k, d]],
        }
    }
}

impl PosteriorParams {
    fn component(&self, k: usize, d: usize) -> NormalGamma {
        NormalGamma {
            m: self.m_star[[k, d]],
            beta: self.beta_star[[k, d]],
            a: self.a_star[[k, d]],
            b: self.b_star[[k, d]],
        }
    }

    /// The posterior of an image without descriptors.
    pub fn prior(model: &LatentMogModel) -> Self {
        PosteriorParams {
            alpha_star: model.alpha.clone(),
            m_star: model.m.clone(),
            beta_star: model.beta.clone(),
            a_star: model.a.clone(),
            b_star: model.b.clone(),
        }
    }
}

fn check_shapes(model: &LatentMogModel, stats: &SufficientStats) -> Result<()> {
    if stats.n_components() != model.n_components() {
        return Err(Error::DimensionMismatch {
            expected: model.n_components(),
            got: stats.n_components(),
        });
    }
    if stats.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: stats.dim(),
        });
    }
    Ok(())
}

/// Optimal posterior on the MoG parameters for fixed assignments:
/// `α* = α + s0`, `β* = β + s0`, `m* = (s1 + βm)/β*`, `a* = a + s0/2`,
/// `b* = b + ½(βm² + s2) − ½β*m*²`.
pub fn posterior_from_stats(model: &LatentMogModel, stats: &SufficientStats) -> Result<PosteriorParams> {
    check_shapes(model, stats)?;
    let (k, d) = model.m.dim();
    let mut post = PosteriorParams::prior(model);
    post.alpha_star = &model.alpha + &stats.s0;
    for c in 0..k {
        for j in 0..d {
            let ng = model
                .prior(c, j)
                .update(stats.s0[c], stats.s1[[c, j]], stats.s2[[c, j]]);
            post.m_star[[c, j]] = ng.m;
            post.beta_star[[c, j]] = ng.beta;
            post.a_star[[c, j]] = ng.a;
            post.b_star[[c, j]] = ng.b;
        }
    }
    Ok(post)
}

fn dirichlet_term(alpha: ArrayView1<f64>, alpha_star: ArrayView1<f64>, s0: ArrayView1<f64>) -> f64 {
    let a_hat: f64 = alpha.sum();
    let a_star_hat: f64 = alpha_star.sum();
    let psi_hat = digamma(a_star_hat);
    let mut f = ln_gamma(a_hat) - ln_gamma(a_star_hat);
    for c in 0..alpha.len() {
        let e_ln_pi = digamma(alpha_star[c]) - psi_hat;
        f += ln_gamma(alpha_star[c]) - ln_gamma(alpha[c]);
        f += (s0[c] + alpha[c] - alpha_star[c]) * e_ln_pi;
    }
    f
}

/// Contribution of one `(k, d)` pair to the free energy: the expected
/// descriptor log-likelihood plus the expected log prior minus the expected
/// log posterior of `(μ, λ)`.
fn normal_gamma_term(prior: NormalGamma, post: NormalGamma, s0: f64, s1: f64, s2: f64) -> f64 {
    let e_lam = post.e_lambda();
    let e_ln_lam = post.e_ln_lambda();
    let quad = s2 - 2.0 * post.m * s1 + s0 * post.m * post.m;
    let data = s0 * 0.5 * (e_ln_lam - LN_2PI) - 0.5 * (e_lam * quad + s0 / post.beta);
    let dm = post.m - prior.m;
    let log_prior = prior.a * prior.b.ln() - ln_gamma(prior.a) + (prior.a - 1.0) * e_ln_lam
        - prior.b * e_lam
        + 0.5 * (prior.beta.ln() + e_ln_lam - LN_2PI)
        - 0.5 * prior.beta * (e_lam * dm * dm + 1.0 / post.beta);
    let log_post = post.a * post.b.ln() - ln_gamma(post.a) + (post.a - 1.0) * e_ln_lam
        - post.b * e_lam
        + 0.5 * (post.beta.ln() + e_ln_lam - LN_2PI)
        - 0.5;
    data + log_prior - log_post
}

/// Free energy `E_q[ln p(X, w, π, μ, λ)] + H(q)` at an arbitrary posterior,
/// given the statistics of the assignments and their entropy.
pub fn free_energy(
    model: &LatentMogModel,
    post: &PosteriorParams,
    stats: &SufficientStats,
    assignment_entropy: f64,
) -> Result<f64> {
    check_shapes(model, stats)?;
    let (k, d) = model.m.dim();
    let mut terms = Vec::with_capacity(k * d + 2);
    terms.push(dirichlet_term(
        model.alpha.view(),
        post.alpha_star.view(),
        stats.s0.view(),
    ));
    for c in 0..k {
        for j in 0..d {
            terms.push(normal_gamma_term(
                model.prior(c, j),
                post.component(c, j),
                stats.s0[c],
                stats.s1[[c, j]],
                stats.s2[[c, j]],
            ));
        }
    }
    terms.push(assignment_entropy);
    Ok(pairwise_sum(&terms))
}

/// Optimal assignments given the posterior on the MoG parameters.
pub fn update_assignments(post: &PosteriorParams, set: &DescriptorSet) -> Result<Responsibilities> {
    let (k, d) = post.m_star.dim();
    if set.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: set.dim(),
        });
    }
    let psi_hat = digamma(post.alpha_star.sum());
    let mut offset = Array1::zeros(k);
    for c in 0..k {
        let mut o = digamma(post.alpha_star[c]) - psi_hat;
        for j in 0..d {
            let ng = post.component(c, j);
            o += 0.5 * (ng.e_ln_lambda() - LN_2PI) - 0.5 / ng.beta;
        }
        offset[c] = o;
    }
    let e_lam = &post.a_star / &post.b_star;
    let data = set.data();
    let mut q = Array2::zeros((set.len(), k));
    q.axis_chunks_iter_mut(Axis(0), crate::reduce::BLOCK_ROWS)
        .into_par_iter()
        .enumerate()
        .for_each(|(blk, mut chunk)| {
            let mut logits = vec![0.0; k];
            for (i, mut row) in chunk.rows_mut().into_iter().enumerate() {
                let x = data.row(blk * crate::reduce::BLOCK_ROWS + i);
                for c in 0..k {
                    let mut quad = 0.0;
                    for j in 0..d {
                        let diff = x[j] - post.m_star[[c, j]];
                        quad += e_lam[[c, j]] * diff * diff;
                    }
                    logits[c] = offset[c] - 0.5 * quad;
                }
                let lse = log_sum_exp(&logits);
                for c in 0..k {
                    row[c] = (logits[c] - lse).exp();
                }
            }
        });
    Ok(Responsibilities(q))
}

#[derive(Debug, Clone, Copy)]
pub struct InferOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            tol: 1e-9,
            max_iter: 200,
        }
    }
}

/// Alternates the assignment and parameter updates until the free energy
/// stops improving.
///
/// Assignments start from the prior (or from `warm_start` when given).
pub fn infer_latent_mog_from(
    model: &LatentMogModel,
    set: &DescriptorSet,
    opts: InferOptions,
    warm_start: Option<Responsibilities>,
) -> Result<LatentMogPosterior> {
    if set.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: set.dim(),
        });
    }
    let mut q = match warm_start {
        Some(q) => q,
        None => update_assignments(&PosteriorParams::prior(model), set)?,
    };
    let mut trace = Vec::new();
    let mut best: Option<LatentMogPosterior> = None;
    let mut converged = false;
    for _ in 0..opts.max_iter.max(1) {
        let stats = sufficient_stats(&q, set)?;
        let params = posterior_from_stats(model, &stats)?;
        let bound = free_energy(model, &params, &stats, q.entropy())?;
        let prev = trace.last().copied();
        trace.push(bound);
        let next_q = update_assignments(&params, set)?;
        if best.as_ref().is_none_or(|b| bound >= b.bound) {
            best = Some(LatentMogPosterior {
                params,
                resp: Some(q),
                stats,
                bound,
                trace: Vec::new(),
                converged: false,
            });
        }
        if let Some(prev) = prev {
            if (bound - prev).abs() <= opts.tol * f64::abs(prev).max(1.0) {
                converged = true;
                break;
            }
        }
        q = next_q;
    }
    let mut post = best.expect("at least one sweep");
    post.trace = trace;
    post.converged = converged;
    if !converged {
        log::debug!("latent MoG inference hit max_iter={} without converging", opts.max_iter);
    }
    Ok(post)
}

pub fn infer_latent_mog(
    model: &LatentMogModel,
    set: &DescriptorSet,
    opts: InferOptions,
) -> Result<LatentMogPosterior> {
    infer_latent_mog_from(model, set, opts, None)
}

/// Posterior for frozen assignments summarized by their statistics.
pub fn infer_from_stats(model: &LatentMogModel, stats: &SufficientStats) -> Result<LatentMogPosterior> {
    let params = posterior_from_stats(model, stats)?;
    let bound = free_energy(model, &params, stats, 0.0)?;
    Ok(LatentMogPosterior {
        params,
        resp: None,
        stats: stats.clone(),
        bound,
        trace: vec![bound],
        converged: true,
    })
}

/// `∂F/∂(α, m, β, a, b)` at the posterior, blocks concatenated in that order
/// (`K`, then four `K × D` row-major blocks).
pub fn latent_mog_fisher_score(model: &LatentMogModel, post: &PosteriorParams) -> Array1<f64> {
    let (k, d) = model.m.dim();
    let kd = k * d;
    let mut out = Array1::zeros(k * (1 + 4 * d));
    let psi_star_hat = digamma(post.alpha_star.sum());
    let psi_hat = digamma(model.alpha.sum());
    for c in 0..k {
        out[c] = (digamma(post.alpha_star[c]) - psi_star_hat) - (digamma(model.alpha[c]) - psi_hat);
    }
    for c in 0..k {
        for j in 0..d {
            let prior = model.prior(c, j);
            let q = post.component(c, j);
            let e_lam = q.e_lambda();
            let i = c * d + j;
            let dm = prior.m - q.m;
            out[k + i] = prior.beta * e_lam * (q.m - prior.m);
            out[k + kd + i] = 0.5 * (1.0 / prior.beta - e_lam * dm * dm - 1.0 / q.beta);
            out[k + 2 * kd + i] = q.e_ln_lambda() - (digamma(prior.a) - prior.b.ln());
            out[k + 3 * kd + i] = prior.a / prior.b - e_lam;
        }
    }
    out
}

/// Layout of [`latent_mog_fisher_score`].
pub fn latent_mog_layout(k: usize, d: usize) -> Vec<LayoutBlock> {
    let kd = k * d;
    vec![
        LayoutBlock::new("latmog.alpha", 0, k, 1),
        LayoutBlock::new("latmog.m", k, kd, d),
        LayoutBlock::new("latmog.beta", k + kd, kd, d),
        LayoutBlock::new("latmog.a", k + 2 * kd, kd, d),
        LayoutBlock::new("latmog.b", k + 3 * kd, kd, d),
    ]
}

/// iid MoG Fisher score w.r.t. `(γ, μ, λ)` with `π = softmax(γ)` and
/// `λ = 1/σ`; length `K(1 + 2D)`.
pub fn mog_fisher_score(model: &GaussianMixture, stats: &SufficientStats) -> Result<Array1<f64>> {
    let (k, d) = model.means.dim();
    if stats.n_components() != k || stats.dim() != d {
        return Err(Error::DimensionMismatch {
            expected: k * d,
            got: stats.n_components() * stats.dim(),
        });
    }
    let n = stats.total();
    let kd = k * d;
    let mut out = Array1::zeros(k * (1 + 2 * d));
    for c in 0..k {
        let s0 = stats.s0[c];
        out[c] = s0 - n * model.weights[c];
        for j in 0..d {
            let (mu, var) = (model.means[[c, j]], model.variances[[c, j]]);
            let (s1, s2) = (stats.s1[[c, j]], stats.s2[[c, j]]);
            out[k + c * d + j] = (s1 - s0 * mu) / var;
            out[k + kd + c * d + j] = 0.5 * (s0 * var - (s2 - 2.0 * mu * s1 + s0 * mu * mu));
        }
    }
    Ok(out)
}

pub fn mog_layout(k: usize, d: usize) -> Vec<LayoutBlock> {
    vec![
        LayoutBlock::new("mog.gamma", 0, k, 1),
        LayoutBlock::new("mog.mu", k, k * d, d),
        LayoutBlock::new("mog.lambda", k + k * d, k * d, d),
    ]
}

/// Minimum soft count for an image to contribute per-image moments of a
/// component during initialization.
const ACTIVE_COUNT: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct InitReport {
    pub model: LatentMogModel,
    /// Components that were never active and fell back to global moments.
    pub inactive: Vec<usize>,
    /// `(k, d)` pairs whose moment fits hit a cap.
    pub capped: Vec<(usize, usize)>,
}

/// Initializes hyper-parameters by moment matching on per-image statistics.
///
/// Per-image precisions above `trunc_factor ×` the global precision of the
/// same `(k, d)` are truncated before the Gamma fit.
pub fn init_latent_mog(stats_per_image: &[SufficientStats], trunc_factor: f64) -> Result<InitReport> {
    if stats_per_image.len() < 2 {
        return Err(Error::invalid("initialization needs at least two images"));
    }
    if !(trunc_factor > 0.0) {
        return Err(Error::invalid("trunc_factor must be positive"));
    }
    let (k, d) = (stats_per_image[0].n_components(), stats_per_image[0].dim());
    if stats_per_image.iter().any(|s| s.n_components() != k || s.dim() != d) {
        return Err(Error::invalid("statistics with inconsistent shapes"));
    }

    // Dirichlet on normalized zero-order statistics.
    let mut rows = Vec::new();
    for s in stats_per_image {
        let total = s.total();
        if total > 0.0 {
            rows.extend(s.s0.iter().map(|v| v / total));
        }
    }
    let n_rows = rows.len() / k;
    if n_rows == 0 {
        return Err(Error::invalid("all images are empty"));
    }
    let rows = Array2::from_shape_vec((n_rows, k), rows).expect("shape");
    let alpha = fit_dirichlet_moment_match(rows.view(), Array1::ones(n_rows).view())?
        .model
        .alpha;

    let mut m = Array2::zeros((k, d));
    let mut beta = Array2::zeros((k, d));
    let mut a = Array2::zeros((k, d));
    let mut b = Array2::zeros((k, d));
    let mut inactive = Vec::new();
    let mut capped = Vec::new();
    for c in 0..k {
        let total_s0: f64 = pairwise_sum(&stats_per_image.iter().map(|s| s.s0[c]).collect::<Vec<_>>());
        for j in 0..d {
            let s1: f64 = pairwise_sum(&stats_per_image.iter().map(|s| s.s1[[c, j]]).collect::<Vec<_>>());
            let s2: f64 = pairwise_sum(&stats_per_image.iter().map(|s| s.s2[[c, j]]).collect::<Vec<_>>());
            if total_s0 < ACTIVE_COUNT {
                continue;
            }
            let g_mean = s1 / total_s0;
            let g_var = (s2 / total_s0 - g_mean * g_mean).max(1e-12);
            let g_prec = 1.0 / g_var;
            let cap = trunc_factor * g_prec;

            let (mut w_sum, mut mean_acc, mut mean_sq, mut prec_acc, mut prec_sq) =
                (0.0, 0.0, 0.0, 0.0, 0.0);
            for s in stats_per_image {
                let w = s.s0[c];
                if w <= ACTIVE_COUNT {
                    continue;
                }
                let mean = s.s1[[c, j]] / w;
                let var = s.s2[[c, j]] / w - mean * mean;
                let prec = if var > 0.0 { (1.0 / var).min(cap) } else { cap };
                w_sum += w;
                mean_acc += w * mean;
                mean_sq += w * mean * mean;
                prec_acc += w * prec;
                prec_sq += w * prec * prec;
            }
            let mean_mean = mean_acc / w_sum;
            let mean_var = (mean_sq / w_sum - mean_mean * mean_mean).max(0.0);
            let prec_mean = prec_acc / w_sum;
            let prec_var = (prec_sq / w_sum - prec_mean * prec_mean).max(0.0);

            let mut hit_cap = false;
            let shape = if prec_var > prec_mean * prec_mean / PARAM_CAP {
                prec_mean * prec_mean / prec_var
            } else {
                hit_cap = true;
                PARAM_CAP
            };
            let rate = shape / prec_mean;
            // Var[μ] = 1/(β E[λ]) under the Normal-Gamma prior.
            let mut precision_of_mean = if mean_var > 0.0 {
                1.0 / (mean_var * prec_mean)
            } else {
                PARAM_CAP
            };
            if !(PARAM_FLOOR..=PARAM_CAP).contains(&precision_of_mean) {
                hit_cap = true;
                precision_of_mean = precision_of_mean.clamp(PARAM_FLOOR, PARAM_CAP);
            }
            if hit_cap {
                capped.push((c, j));
            }
            m[[c, j]] = mean_mean;
            beta[[c, j]] = precision_of_mean;
            a[[c, j]] = shape.clamp(PARAM_FLOOR, PARAM_CAP);
            b[[c, j]] = rate.clamp(PARAM_FLOOR, PARAM_CAP);
        }
        if total_s0 < ACTIVE_COUNT {
            inactive.push(c);
        }
    }
    if !inactive.is_empty() {
        log::warn!("components {inactive:?} are never active; using global moments");
        let s0: f64 = stats_per_image.iter().map(|s| s.s0.sum()).sum();
        for j in 0..d {
            let s1: f64 = stats_per_image.iter().map(|s| s.s1.column(j).sum()).sum();
            let s2: f64 = stats_per_image.iter().map(|s| s.s2.column(j).sum()).sum();
            let (mean, var) = if s0 > 0.0 {
                let mean = s1 / s0;
                (mean, (s2 / s0 - mean * mean).max(1e-12))
            } else {
                (0.0, 1.0)
            };
            for &c in &inactive {
                m[[c, j]] = mean;
                beta[[c, j]] = 1.0;
                a[[c, j]] = 1.0;
                b[[c, j]] = var.clamp(PARAM_FLOOR, PARAM_CAP);
            }
        }
    }
    let alpha = alpha.mapv(|v| v.max(ALPHA_FLOOR));
    Ok(InitReport {
        model: LatentMogModel::new(alpha, m, beta, a, b)?,
        inactive,
        capped,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub outer_iters: usize,
    /// Gradient steps per parameter block in each outer iteration.
    pub inner_steps: usize,
    /// Also re-optimize assignments (requires descriptors).
    pub update_assignments: bool,
    /// Assignment sweeps per image per outer iteration.
    pub assignment_sweeps: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            outer_iters: 50,
            inner_steps: 5,
            update_assignments: false,
            assignment_sweeps: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub model: LatentMogModel,
    /// Summed bound at the initial model and after each outer iteration.
    pub trace: Vec<f64>,
    /// Parameter blocks whose line search failed after 20 halvings.
    pub line_search_failures: usize,
}

const MAX_HALVINGS: usize = 20;
const ARMIJO: f64 = 1e-4;

/// One parameter block: its current point, objective and gradient (in the
/// optimization coordinates).
trait Block {
    fn point(&self) -> Vec<f64>;
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Vec<f64>;
}

/// Backtracking gradient ascent on one block; returns the final point and
/// whether a line search failed.
fn ascend<B: Block>(block: &B, steps: usize, step0: f64) -> (Vec<f64>, bool) {
    let mut x = block.point();
    let mut fx = block.value(&x);
    let mut step = step0;
    let mut failed = false;
    for _ in 0..steps {
        let g = block.gradient(&x);
        let g2: f64 = g.iter().map(|v| v * v).sum();
        if !(g2 > 0.0) || !g2.is_finite() {
            break;
        }
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi + step * gi).collect();
            let ft = block.value(&trial);
            if ft.is_finite() && ft >= fx + ARMIJO * step * g2 {
                x = trial;
                fx = ft;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            failed = true;
            break;
        }
        step *= 2.0;
    }
    (x, failed)
}

/// Dirichlet block in `ln α`.
struct AlphaBlock<'a> {
    alpha: &'a Array1<f64>,
    s0: &'a [Array1<f64>],
}

impl AlphaBlock<'_> {
    fn objective(&self, alpha: ArrayView1<f64>) -> f64 {
        let terms: Vec<f64> = self
            .s0
            .iter()
            .map(|s0| {
                let star = &alpha + s0;
                dirichlet_term(alpha, star.view(), s0.view())
            })
            .collect();
        pairwise_sum(&terms)
    }
}

impl Block for AlphaBlock<'_> {
    fn point(&self) -> Vec<f64> {
        self.alpha.iter().map(|v| v.ln()).collect()
    }

    fn value(&self, x: &[f64]) -> f64 {
        if x.iter().any(|v| v.exp() < ALPHA_FLOOR || v.exp() > 1e12) {
            return f64::NEG_INFINITY;
        }
        self.objective(Array1::from_iter(x.iter().map(|v| v.exp())).view())
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let alpha = Array1::from_iter(x.iter().map(|v| v.exp()));
        let k = alpha.len();
        let psi_hat = digamma(alpha.sum());
        let mut g = vec![0.0; k];
        let mut per_image: Vec<Vec<f64>> = Vec::with_capacity(self.s0.len());
        for s0 in self.s0 {
            let star = &alpha + s0;
            let psi_star_hat = digamma(star.sum());
            per_image.push(
                (0..k)
                    .map(|c| digamma(star[c]) - psi_star_hat - digamma(alpha[c]) + psi_hat)
                    .collect(),
            );
        }
        for (c, gc) in g.iter_mut().enumerate() {
            let col: Vec<f64> = per_image.iter().map(|v| v[c]).collect();
            *gc = alpha[c] * pairwise_sum(&col);
        }
        g
    }
}

/// Normal-Gamma block of one `(k, d)` pair in `(m, ln β, ln a, ln b)`.
struct NormalGammaBlock {
    prior: NormalGamma,
    stats: Vec<(f64, f64, f64)>,
}

impl NormalGammaBlock {
    fn decode(x: &[f64]) -> Option<NormalGamma> {
        let p = NormalGamma {
            m: x[0],
            beta: x[1].exp(),
            a: x[2].exp(),
            b: x[3].exp(),
        };
        let ok = [p.beta, p.a, p.b]
            .iter()
            .all(|v| (PARAM_FLOOR..=1e12).contains(v));
        ok.then_some(p)
    }
}

impl Block for NormalGammaBlock {
    fn point(&self) -> Vec<f64> {
        vec![
            self.prior.m,
            self.prior.beta.ln(),
            self.prior.a.ln(),
            self.prior.b.ln(),
        ]
    }

    fn value(&self, x: &[f64]) -> f64 {
        let Some(prior) = Self::decode(x) else {
            return f64::NEG_INFINITY;
        };
        let terms: Vec<f64> = self
            .stats
            .iter()
            .map(|&(s0, s1, s2)| normal_gamma_term(prior, prior.update(s0, s1, s2), s0, s1, s2))
            .collect();
        pairwise_sum(&terms)
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let prior = Self::decode(x).expect("gradient at a feasible point");
        let mut parts: [Vec<f64>; 4] = Default::default();
        for &(s0, s1, s2) in &self.stats {
            let q = prior.update(s0, s1, s2);
            let e_lam = q.e_lambda();
            let dm = prior.m - q.m;
            parts[0].push(prior.beta * e_lam * (q.m - prior.m));
            parts[1].push(0.5 * (1.0 / prior.beta - e_lam * dm * dm - 1.0 / q.beta));
            parts[2].push(q.e_ln_lambda() - digamma(prior.a) + prior.b.ln());
            parts[3].push(prior.a / prior.b - e_lam);
        }
        vec![
            pairwise_sum(&parts[0]),
            prior.beta * pairwise_sum(&parts[1]),
            prior.a * pairwise_sum(&parts[2]),
            prior.b * pairwise_sum(&parts[3]),
        ]
    }
}

/// Summed free energy over images at the optimal posterior for the given
/// (frozen) statistics, excluding assignment entropies.
pub fn summed_bound(model: &LatentMogModel, stats_per_image: &[SufficientStats]) -> Result<f64> {
    let bounds: Vec<f64> = stats_per_image
        .par_iter()
        .map(|s| infer_from_stats(model, s).map(|p| p.bound))
        .collect::<Result<_>>()?;
    Ok(pairwise_sum(&bounds))
}

/// Hyper-parameter ascent for fixed assignments. Every block is optimized
/// independently since the summed bound separates over `α` and over the
/// `(k, d)` Normal-Gamma pairs.
fn ascend_hyperparameters(
    model: &LatentMogModel,
    stats_per_image: &[SufficientStats],
    inner_steps: usize,
) -> (LatentMogModel, usize) {
    let (k, d) = model.m.dim();
    let n_images = stats_per_image.len().max(1) as f64;
    let s0: Vec<Array1<f64>> = stats_per_image.iter().map(|s| s.s0.clone()).collect();
    let alpha_block = AlphaBlock {
        alpha: &model.alpha,
        s0: &s0,
    };
    let (alpha_x, alpha_failed) = ascend(&alpha_block, inner_steps, 1.0 / n_images);

    let results: Vec<(Vec<f64>, bool)> = (0..k * d)
        .into_par_iter()
        .map(|i| {
            let (c, j) = (i / d, i % d);
            let block = NormalGammaBlock {
                prior: model.prior(c, j),
                stats: stats_per_image
                    .iter()
                    .map(|s| (s.s0[c], s.s1[[c, j]], s.s2[[c, j]]))
                    .collect(),
            };
            ascend(&block, inner_steps, 1.0 / n_images)
        })
        .collect();

    let mut next = model.clone();
    next.alpha = Array1::from_iter(alpha_x.iter().map(|v| v.exp()));
    let mut failures = usize::from(alpha_failed);
    for (i, (x, failed)) in results.into_iter().enumerate() {
        let (c, j) = (i / d, i % d);
        next.m[[c, j]] = x[0];
        next.beta[[c, j]] = x[1].exp();
        next.a[[c, j]] = x[2].exp();
        next.b[[c, j]] = x[3].exp();
        failures += usize::from(failed);
    }
    (next, failures)
}

/// Variational EM on the hyper-parameters with assignments frozen (the
/// statistics are precomputed once from the iid vocabulary).
pub fn train_latent_mog(
    stats_per_image: &[SufficientStats],
    init: &LatentMogModel,
    opts: TrainOptions,
) -> Result<TrainReport> {
    for s in stats_per_image {
        check_shapes(init, s)?;
    }
    let mut model = init.clone();
    let mut trace = vec![summed_bound(&model, stats_per_image)?];
    let mut failures = 0;
    for iter in 0..opts.outer_iters {
        let (next, failed) = ascend_hyperparameters(&model, stats_per_image, opts.inner_steps);
        if failed > 0 {
            log::debug!("outer iteration {iter}: {failed} line search(es) kept their parameters");
        }
        failures += failed;
        model = next;
        trace.push(summed_bound(&model, stats_per_image)?);
    }
    Ok(TrainReport {
        model,
        trace,
        line_search_failures: failures,
    })
}

/// Variational EM alternating hyper-parameter ascent with re-optimization of
/// every image's assignments (warm-started from the previous iteration).
pub fn train_latent_mog_with_assignments(
    sets: &[DescriptorSet],
    init: &LatentMogModel,
    opts: TrainOptions,
) -> Result<TrainReport> {
    let infer = InferOptions {
        tol: 0.0,
        max_iter: opts.assignment_sweeps.max(1),
    };
    let mut model = init.clone();
    let mut posts: Vec<LatentMogPosterior> = sets
        .par_iter()
        .map(|s| infer_latent_mog_from(&model, s, infer, None))
        .collect::<Result<_>>()?;
    let total = |posts: &[LatentMogPosterior]| pairwise_sum(&posts.iter().map(|p| p.bound).collect::<Vec<_>>());
    let mut trace = vec![total(&posts)];
    let mut failures = 0;
    for _ in 0..opts.outer_iters {
        let stats: Vec<SufficientStats> = posts.iter().map(|p| p.stats.clone()).collect();
        let (next, failed) = ascend_hyperparameters(&model, &stats, opts.inner_steps);
        failures += failed;
        model = next;
        posts = sets
            .par_iter()
            .zip(posts.into_par_iter())
            .map(|(s, p)| infer_latent_mog_from(&model, s, infer, p.resp))
            .collect::<Result<_>>()?;
        trace.push(total(&posts));
    }
    Ok(TrainReport {
        model,
        trace,
        line_search_failures: failures,
    })
}

/// Splits a latent MoG score into its five blocks.
pub fn split_score(score: &Array1<f64>, k: usize, d: usize) -> [Array1<f64>; 5] {
    let kd = k * d;
    [
        score.slice(s![..k]).to_owned(),
        score.slice(s![k..k + kd]).to_owned(),
        score.slice(s![k + kd..k + 2 * kd]).to_owned(),
        score.slice(s![k + 2 * kd..k + 3 * kd]).to_owned(),
        score.slice(s![k + 3 * kd..]).to_owned(),
    ]
}
