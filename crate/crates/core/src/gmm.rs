//! The iid mixture-of-Gaussians visual vocabulary: EM training, soft
//! assignments, clipped assignments, and per-image sufficient statistics.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::descriptors::DescriptorSet;
use crate::error::{Error, Result};
use crate::reduce::{par_blocks, tree_reduce, BLOCK_ROWS};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal-covariance mixture of Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    pub weights: Array1<f64>,
    pub means: Array2<f64>,
    pub variances: Array2<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Array1<f64>, means: Array2<f64>, variances: Array2<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.nrows() != k || variances.dim() != means.dim() {
            return Err(Error::invalid("inconsistent mixture shapes"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.sum() - 1.0).abs() > 1e-9 {
            return Err(Error::Domain("mixture weights must lie on the simplex".into()));
        }
        if variances.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain("mixture variances must be positive".into()));
        }
        if means.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("mixture means must be finite".into()));
        }
        Ok(GaussianMixture {
            weights,
            means,
            variances,
        })
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    /// `ln π_k − ½ Σ_d ln(2π σ_kd)` per component.
    fn log_norm(&self) -> Array1<f64> {
        Array1::from_shape_fn(self.n_components(), |k| {
            let logdet: f64 = self.variances.row(k).iter().map(|v| v.ln()).sum();
            self.weights[k].max(f64::MIN_POSITIVE).ln() - 0.5 * (self.dim() as f64 * LN_2PI + logdet)
        })
    }

    /// Joint log densities `ln π_k N(x; μ_k, σ_k)` for every component.
    fn joint_log_densities(&self, x: ArrayView1<f64>, log_norm: &Array1<f64>, out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let mut q = 0.0;
            for ((xd, m), v) in x.iter().zip(self.means.row(k)).zip(self.variances.row(k)) {
                let diff = xd - m;
                q += diff * diff / v;
            }
            *o = log_norm[k] - 0.5 * q;
        }
    }

    /// `ln p(x)` for one descriptor.
    pub fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        let log_norm = self.log_norm();
        let mut buf = vec![0.0; self.n_components()];
        self.joint_log_densities(x, &log_norm, &mut buf);
        log_sum_exp(&buf)
    }

    /// Mean log-likelihood per descriptor.
    pub fn mean_log_likelihood(&self, data: ArrayView2<f64>) -> f64 {
        let n = data.nrows();
        if n == 0 {
            return 0.0;
        }
        let log_norm = self.log_norm();
        let total = par_blocks(n, BLOCK_ROWS, |r| {
            let mut buf = vec![0.0; self.n_components()];
            let mut acc = 0.0;
            for x in data.slice(s![r, ..]).rows() {
                self.joint_log_densities(x, &log_norm, &mut buf);
                acc += log_sum_exp(&buf);
            }
            acc
        })
        .unwrap_or(0.0);
        total / n as f64
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-stochastic `N × K` soft assignment matrix `q_ik = q(w_i = k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities(pub Array2<f64>);

impl Responsibilities {
    pub fn n_components(&self) -> usize {
        self.0.ncols()
    }

    pub fn len(&self) -> usize {
        self.0.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.nrows() == 0
    }

    /// `−Σ_ik q_ik ln q_ik`.
    pub fn entropy(&self) -> f64 {
        let per_row: Vec<f64> = self
            .0
            .rows()
            .into_iter()
            .map(|r| -r.iter().filter(|q| **q > 0.0).map(|q| q * q.ln()).sum::<f64>())
            .collect();
        crate::reduce::pairwise_sum(&per_row)
    }
}

/// Per-component zero-, first- and second-order soft statistics of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub s0: Array1<f64>,
    pub s1: Array2<f64>,
    pub s2: Array2<f64>,
}

impl SufficientStats {
    pub fn zeros(k: usize, d: usize) -> Self {
        SufficientStats {
            s0: Array1::zeros(k),
            s1: Array2::zeros((k, d)),
            s2: Array2::zeros((k, d)),
        }
    }

    pub fn n_components(&self) -> usize {
        self.s0.len()
    }

    pub fn dim(&self) -> usize {
        self.s1.ncols()
    }

    /// Total soft count `Σ_k s0_k`.
    pub fn total(&self) -> f64 {
        crate::reduce::pairwise_sum(self.s0.as_slice().expect("contiguous"))
    }
}

#[derive(Debug, Clone)]
pub struct GmmOptions {
    pub n_components: usize,
    pub seed: u64,
    /// Relative improvement of the mean log-likelihood below which EM stops.
    pub tol: f64,
    pub max_iter: usize,
}

impl GmmOptions {
    pub fn new(n_components: usize, seed: u64) -> Self {
        GmmOptions {
            n_components,
            seed,
            tol: 1e-5,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GmmFit {
    pub model: GaussianMixture,
    /// Mean per-sample log-likelihood of each evaluated iterate.
    pub trace: Vec<f64>,
    /// Iterations after which an empty component was re-seeded; the
    /// log-likelihood may drop across these.
    pub reseeded: Vec<usize>,
    pub converged: bool,
}

/// Soft counts below this mark a component as empty.
const EMPTY_COMPONENT: f64 = 1e-8;

/// Trains a diagonal MoG with EM from a k-means++ seeding.
pub fn train_gmm(samples: ArrayView2<f64>, opts: &GmmOptions) -> Result<GmmFit> {
    let (n, d) = samples.dim();
    let k = opts.n_components;
    if k == 0 {
        return Err(Error::invalid("number of components must be >= 1"));
    }
    if n < 10 * k {
        return Err(Error::invalid(format!(
            "need at least {} samples for {k} components, got {n}",
            10 * k
        )));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite training sample".into()));
    }

    let (_, global_var) = column_moments(samples);
    let floor = global_var.mapv(|v| (1e-4 * v).max(1e-12));
    let global_var = Zip::from(&global_var)
        .and(&floor)
        .map_collect(|v, f| v.max(*f));

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let centers = kmeans_pp(samples, k, &mut rng);
    let mut model = GaussianMixture {
        weights: Array1::from_elem(k, 1.0 / k as f64),
        means: centers,
        variances: Array2::from_shape_fn((k, d), |(_, j)| global_var[j]),
    };

    let mut trace = Vec::new();
    let mut reseeded = Vec::new();
    let mut converged = false;
    for iter in 0..opts.max_iter {
        let (ll_sum, stats) = em_accumulate(&model, samples);
        let ll = ll_sum / n as f64;
        if let Some(&prev) = trace.last() {
            trace.push(ll);
            let prev: f64 = prev;
            if (ll - prev) <= opts.tol * prev.abs().max(f64::MIN_POSITIVE) {
                converged = true;
                break;
            }
        } else {
            trace.push(ll);
        }

        let mut empty = Vec::new();
        for c in 0..k {
            let s0 = stats.s0[c];
            if s0 < EMPTY_COMPONENT {
                empty.push(c);
                continue;
            }
            model.weights[c] = s0 / n as f64;
            for j in 0..d {
                let mean = stats.s1[[c, j]] / s0;
                let var = stats.s2[[c, j]] / s0 - mean * mean;
                model.means[[c, j]] = mean;
                model.variances[[c, j]] = var.max(floor[j]);
            }
        }
        if !empty.is_empty() {
            for c in empty {
                let far = farthest_sample(&model, samples);
                log::info!("EM iteration {iter}: component {c} is empty, re-seeding at sample {far}");
                model.means.row_mut(c).assign(&samples.row(far));
                model.variances.row_mut(c).assign(&global_var);
                model.weights[c] = 1.0 / n as f64;
            }
            let total = model.weights.sum();
            model.weights /= total;
            reseeded.push(iter);
        }
    }
    Ok(GmmFit {
        model,
        trace,
        reseeded,
        converged,
    })
}

fn column_moments(samples: ArrayView2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = samples.nrows();
    let (s1, s2) = par_blocks(n, BLOCK_ROWS, |r| {
        let block = samples.slice(s![r, ..]);
        (block.sum_axis(Axis(0)), block.mapv(|v| v * v).sum_axis(Axis(0)))
    })
    .expect("non-empty");
    let mean = s1 / n as f64;
    let var = Zip::from(&s2)
        .and(&mean)
        .map_collect(|s, m| (s / n as f64 - m * m).max(0.0));
    (mean, var)
}

fn kmeans_pp(samples: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = samples.nrows();
    let mut centers = Array2::zeros((k, samples.ncols()));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&samples.row(first));
    let sq_dist = |x: ArrayView1<f64>, c: ArrayView1<f64>| -> f64 {
        x.iter().zip(c.iter()).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    let mut nearest: Vec<f64> = samples
        .rows()
        .into_iter()
        .map(|x| sq_dist(x, centers.row(0)))
        .collect();
    for c in 1..k {
        let total = crate::reduce::pairwise_sum(&nearest);
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, w) in nearest.iter().enumerate() {
                if target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&samples.row(pick));
        for (i, x) in samples.rows().into_iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(x, centers.row(c)));
        }
    }
    centers
}

/// Sample with the largest Mahalanobis distance to its closest component.
fn farthest_sample(model: &GaussianMixture, samples: ArrayView2<f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in samples.rows().into_iter().enumerate() {
        let mut nearest = f64::INFINITY;
        for c in 0..model.n_components() {
            let mut q = 0.0;
            for ((xd, m), v) in x.iter().zip(model.means.row(c)).zip(model.variances.row(c)) {
                q += (xd - m) * (xd - m) / v;
            }
            nearest = nearest.min(q);
        }
        if nearest > best.1 {
            best = (i, nearest);
        }
    }
    best.0
}

fn em_accumulate(model: &GaussianMixture, samples: ArrayView2<f64>) -> (f64, SufficientStats) {
    let k = model.n_components();
    let d = model.dim();
    let log_norm = model.log_norm();
    let (ll, s0, s1, s2) = {
        let parts: Vec<(f64, (Array1<f64>, Array2<f64>, Array2<f64>))> = (0..samples
            .nrows()
            .div_ceil(BLOCK_ROWS))
            .into_par_iter()
            .map(|b| {
                let r = b * BLOCK_ROWS..((b + 1) * BLOCK_ROWS).min(samples.nrows());
                let block = samples.slice(s![r, ..]);
                let mut ll = 0.0;
                let mut q = Array2::zeros((block.nrows(), k));
                let mut buf = vec![0.0; k];
                for (i, x) in block.rows().into_iter().enumerate() {
                    model.joint_log_densities(x, &log_norm, &mut buf);
                    let lse = log_sum_exp(&buf);
                    ll += lse;
                    for c in 0..k {
                        q[[i, c]] = (buf[c] - lse).exp();
                    }
                }
                let x2 = block.mapv(|v| v * v);
                (ll, (q.sum_axis(Axis(0)), q.t().dot(&block), q.t().dot(&x2)))
            })
            .collect();
        let (ll, (s0, s1, s2)) = tree_reduce(parts).unwrap_or((
            0.0,
            (Array1::zeros(k), Array2::zeros((k, d)), Array2::zeros((k, d))),
        ));
        (ll, s0, s1, s2)
    };
    (ll, SufficientStats { s0, s1, s2 })
}

/// Soft assignments `p(k | x_i)` computed in the log domain.
pub fn posteriors(model: &GaussianMixture, set: &DescriptorSet) -> Result<Responsibilities> {
    if set.dim() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: set.dim(),
        });
    }
    let k = model.n_components();
    let log_norm = model.log_norm();
    let data = set.data();
    let mut q = Array2::zeros((set.len(), k));
    q.axis_chunks_iter_mut(Axis(0), BLOCK_ROWS)
        .into_par_iter()
        .enumerate()
        .for_each(|(b, mut chunk)| {
            let mut buf = vec![0.0; k];
            for (i, mut row) in chunk.rows_mut().into_iter().enumerate() {
                model.joint_log_densities(data.row(b * BLOCK_ROWS + i), &log_norm, &mut buf);
                let lse = log_sum_exp(&buf);
                for c in 0..k {
                    row[c] = (buf[c] - lse).exp();
                }
            }
        });
    Ok(Responsibilities(q))
}

/// Keeps the `k_prime` largest entries of every row and renormalizes them.
///
/// Ties are broken toward the lower component index.
pub fn clip_posteriors(resp: &Responsibilities, k_prime: usize) -> Result<Responsibilities> {
    let k = resp.n_components();
    if k_prime == 0 || k_prime > k {
        return Err(Error::invalid(format!(
            "k_prime must be in [1, {k}], got {k_prime}"
        )));
    }
    if k_prime == k {
        return Ok(resp.clone());
    }
    let mut out = Array2::zeros(resp.0.dim());
    let mut order: Vec<usize> = (0..k).collect();
    for (row, mut dst) in resp.0.rows().into_iter().zip(out.rows_mut()) {
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        let kept = &order[..k_prime];
        let mass: f64 = kept.iter().map(|&c| row[c]).sum();
        for &c in kept {
            dst[c] = if mass > 0.0 {
                row[c] / mass
            } else {
                1.0 / k_prime as f64
            };
        }
    }
    Ok(Responsibilities(out))
}

/// `s0_k = Σ_i q_ik`, `s1_k = Σ_i q_ik x_i`, `s2_k = Σ_i q_ik x_i²`.
pub fn sufficient_stats(resp: &Responsibilities, set: &DescriptorSet) -> Result<SufficientStats> {
    if resp.len() != set.len() {
        return Err(Error::DimensionMismatch {
            expected: set.len(),
            got: resp.len(),
        });
    }
    let (k, d) = (resp.n_components(), set.dim());
    let data = set.data();
    let q = resp.0.view();
    let acc = par_blocks(set.len(), BLOCK_ROWS, |r| {
        let qb = q.slice(s![r.clone(), ..]);
        let xb = data.slice(s![r, ..]);
        let x2 = xb.mapv(|v| v * v);
        (qb.sum_axis(Axis(0)), qb.t().dot(&xb), qb.t().dot(&x2))
    });
    Ok(match acc {
        Some((s0, s1, s2)) => SufficientStats { s0, s1, s2 },
        None => SufficientStats::zeros(k, d),
    })
}

const STATS_MAGIC: &[u8; 4] = b"NIFS";
const STATS_VERSION: u32 = 1;

/// Binary stats cache: `"NIFS"`, `u32` version, `u32` K, `u32` D, then s0
/// (`K` f64), s1 (`K × D` f64), s2 (`K × D` f64), little-endian.
pub fn encode_stats(stats: &SufficientStats) -> Vec<u8> {
    let (k, d) = (stats.n_components(), stats.dim());
    let mut buf = Vec::with_capacity(16 + 8 * k * (1 + 2 * d));
    buf.extend_from_slice(STATS_MAGIC);
    buf.extend_from_slice(&STATS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(k as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    for v in stats.s0.iter().chain(stats.s1.iter()).chain(stats.s2.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_stats(bytes: &[u8]) -> Result<SufficientStats> {
    if bytes.len() < 4 || &bytes[..4] != STATS_MAGIC {
        return Err(Error::parse(0, "bad magic"));
    }
    if bytes.len() < 16 {
        return Err(Error::parse(bytes.len() as u64, "truncated header"));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if word(4) != STATS_VERSION {
        return Err(Error::parse(4, format!("unsupported version {}", word(4))));
    }
    let (k, d) = (word(8) as usize, word(12) as usize);
    let count = k * (1 + 2 * d);
    let need = 16 + 8 * count;
    if bytes.len() < need {
        let offset = 16 + 8 * ((bytes.len() - 16) / 8);
        return Err(Error::parse(offset as u64, "truncated payload"));
    }
    let mut values = Vec::with_capacity(count);
    for i in 0..count {
        let o = 16 + 8 * i;
        let v = f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        if !v.is_finite() {
            return Err(Error::parse(o as u64, "non-finite value"));
        }
        values.push(v);
    }
    let s0 = Array1::from(values[..k].to_vec());
    let s1 = Array2::from_shape_vec((k, d), values[k..k + k * d].to_vec()).unwrap();
    let s2 = Array2::from_shape_vec((k, d), values[k + k * d..].to_vec()).unwrap();
    Ok(SufficientStats { s0, s1, s2 })
}

pub fn write_stats_file(stats: &SufficientStats, path: &Path) -> Result<()> {
    fs::write(path, encode_stats(stats))?;
    Ok(())
}

pub fn read_stats_file(path: &Path) -> Result<SufficientStats> {
    decode_stats(&fs::read(path)?)
}

/// Convenience: posteriors (optionally clipped) followed by statistics.
pub fn image_stats(
    model: &GaussianMixture,
    set: &DescriptorSet,
    clip: Option<usize>,
) -> Result<SufficientStats> {
    let mut q = posteriors(model, set)?;
    if let Some(kp) = clip {
        q = clip_posteriors(&q, kp)?;
    }
    sufficient_stats(&q, set)
}
