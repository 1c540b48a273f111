//! Joint PCA + MoG likelihood study and seeded synthetic corpora drawn from
//! the non-iid generative processes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, Normal, StandardNormal};
use rayon::prelude::*;

use crate::count_models::CountVector;
use crate::descriptors::{fit_pca, project, write_descriptor_file, DatasetIndex, DescriptorSet, IndexEntry, PcaModel, Split};
use crate::encoder::{l2_normalize, power_normalize};
use crate::error::{Error, Result};
use crate::eval::{evaluate, train_linear_svm, Labels, Metric, SvmOptions};
use crate::gmm::{image_stats, log_sum_exp, train_gmm, GaussianMixture, GmmOptions};
use crate::latent_mog::mog_fisher_score;
use crate::reduce::pairwise_sum;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// PCA rotation plus a diagonal MoG in the leading `keep` coordinates.
#[derive(Debug, Clone)]
pub struct JointModel {
    pub pca: PcaModel,
    pub mixture: GaussianMixture,
}

impl JointModel {
    pub fn new(pca: PcaModel, mixture: GaussianMixture) -> Result<Self> {
        if mixture.dim() != pca.keep {
            return Err(Error::DimensionMismatch {
                expected: pca.keep,
                got: mixture.dim(),
            });
        }
        if pca.residual_variances.len() != pca.input_dim() - pca.keep {
            return Err(Error::invalid("PCA model lacks residual variances"));
        }
        Ok(JointModel { pca, mixture })
    }
}

/// Log-density of `x` under the mixture embedded in the full input space:
/// component means are zero-padded and their variances extended with the
/// residual variances of the discarded axes.
pub fn joint_log_likelihood(joint: &JointModel, x: ArrayView1<f64>) -> Result<f64> {
    let JointModel { pca, mixture } = joint;
    if pca.residual_variances.len() != pca.input_dim() - pca.keep {
        return Err(Error::invalid("PCA model lacks residual variances"));
    }
    let z = pca.rotate(x)?;
    let keep = pca.keep;
    let mut residual = -0.5 * (pca.input_dim() - keep) as f64 * LN_2PI;
    for (j, v) in pca.residual_variances.iter().enumerate() {
        let zj = z[keep + j];
        residual -= 0.5 * (v.ln() + zj * zj / v);
    }
    let head = z.slice(ndarray::s![..keep]);
    let logits: Vec<f64> = (0..mixture.n_components())
        .map(|k| {
            let mut l = mixture.weights[k].ln() - 0.5 * keep as f64 * LN_2PI;
            for j in 0..keep {
                let v = mixture.variances[[k, j]];
                let diff = head[j] - mixture.means[[k, j]];
                l -= 0.5 * (v.ln() + diff * diff / v);
            }
            l
        })
        .collect();
    Ok(log_sum_exp(&logits) + residual)
}

/// One labelled image.
#[derive(Debug, Clone)]
pub struct LabelledImage {
    pub set: DescriptorSet,
    pub class: usize,
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub seed: u64,
    /// Maximum number of held-out descriptors scored for the likelihood.
    pub loglik_sample_cap: usize,
    /// Maximum number of training descriptors used to fit PCA and the MoG.
    pub train_sample_cap: usize,
    pub svm: SvmOptions,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            seed: 0,
            loglik_sample_cap: 300_000,
            train_sample_cap: 100_000,
            svm: SvmOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub d: usize,
    pub k: usize,
    pub loglik_per_descriptor: f64,
    pub metric: f64,
}

/// Every `step`-th row so that at most `cap` rows of the stacked sets remain.
fn stacked_sample(images: &[LabelledImage], cap: usize) -> Array2<f64> {
    let dim = images.first().map_or(0, |i| i.set.dim());
    let total: usize = images.iter().map(|i| i.set.len()).sum();
    let step = total.div_ceil(cap.max(1)).max(1);
    let mut rows = Vec::new();
    let mut idx = 0usize;
    for img in images {
        for r in img.set.data().rows() {
            if idx % step == 0 {
                rows.extend(r.iter().copied());
            }
            idx += 1;
        }
    }
    Array2::from_shape_vec((rows.len() / dim.max(1), dim), rows).expect("shape")
}

/// For every `(D, K)` pair: PCA to `D` dimensions and a `K`-component MoG on
/// the training images, the mean joint log-likelihood of a fixed held-out
/// descriptor sample, and the accuracy of a linear SVM on signed-square-root
/// and ℓ2-normalized MoG Fisher vectors. Infeasible pairs are skipped.
pub fn loglik_vs_performance_sweep(
    train: &[LabelledImage],
    heldout: &[LabelledImage],
    pairs: &[(usize, usize)],
    opts: &SweepOptions,
) -> Result<Vec<SweepRow>> {
    if train.is_empty() || heldout.is_empty() {
        return Err(Error::invalid("the sweep needs training and held-out images"));
    }
    let d0 = train[0].set.dim();
    let train_sample = stacked_sample(train, opts.train_sample_cap);
    let heldout_sample = stacked_sample(heldout, opts.loglik_sample_cap);
    let full_pca = fit_pca(train_sample.view(), d0)?;
    let n_classes = train.iter().chain(heldout).map(|i| i.class + 1).max().unwrap_or(0);
    let train_labels = Labels::single_label(&train.iter().map(|i| i.class).collect::<Vec<_>>(), n_classes)?;
    let test_labels = Labels::single_label(&heldout.iter().map(|i| i.class).collect::<Vec<_>>(), n_classes)?;

    let mut rows = Vec::new();
    for &(d, k) in pairs {
        if d < 1 || k < 1 || d > d0 {
            log::warn!("skipping infeasible pair D={d}, K={k}");
            continue;
        }
        let pca = full_pca.with_keep(d)?;
        let projected = project(&pca, &DescriptorSet::new("sample", train_sample.clone(), None)?)?;
        let fit = train_gmm(projected.data(), &GmmOptions::new(k, opts.seed))?;
        let joint = JointModel::new(pca.clone(), fit.model)?;
        let ll: Vec<f64> = heldout_sample
            .axis_iter(Axis(0))
            .into_par_iter()
            .map(|x| joint_log_likelihood(&joint, x))
            .collect::<Result<_>>()?;
        let loglik = pairwise_sum(&ll) / ll.len().max(1) as f64;

        let encode = |images: &[LabelledImage]| -> Result<Array2<f64>> {
            let vectors: Vec<Array1<f64>> = images
                .par_iter()
                .map(|img| {
                    let p = project(&pca, &img.set)?;
                    let stats = image_stats(&joint.mixture, &p, None)?;
                    let g = mog_fisher_score(&joint.mixture, &stats)?;
                    Ok(l2_normalize(power_normalize(g.view(), 0.5)?.view()))
                })
                .collect::<Result<_>>()?;
            let len = vectors[0].len();
            let mut out = Array2::zeros((vectors.len(), len));
            for (i, v) in vectors.iter().enumerate() {
                out.row_mut(i).assign(v);
            }
            Ok(out)
        };
        let x_train = encode(train)?;
        let x_test = encode(heldout)?;
        let svm = train_linear_svm(x_train.view(), &train_labels, Metric::Accuracy, &opts.svm)?;
        let report = evaluate(svm.decision(x_test.view())?.view(), &test_labels, Metric::Accuracy)?;
        rows.push(SweepRow {
            d,
            k,
            loglik_per_descriptor: loglik,
            metric: report.mean,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("D,K,loglik_per_descriptor,metric\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.d, r.k, r.loglik_per_descriptor, r.metric);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Polya,
    Plsa,
    Lda,
    LatMog,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "polya" => Ok(SynthKind::Polya),
            "plsa" => Ok(SynthKind::Plsa),
            "lda" => Ok(SynthKind::Lda),
            "latmog" => Ok(SynthKind::LatMog),
            _ => Err(Error::invalid(format!("unknown generator '{s}'"))),
        }
    }
}

/// Synthetic corpus description. Classes share their priors except for a
/// class-specific shift (of word proportions or component means).
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub descriptors_per_image: usize,
    /// Vocabulary size (count models) or number of components (latent MoG).
    pub vocab_size: usize,
    /// Descriptor dimension.
    pub dim: usize,
    /// Number of topics for the topic-model kinds.
    pub topics: usize,
    /// Dirichlet precision of the per-image word (or component) proportions;
    /// small values give bursty images.
    pub precision: f64,
    /// Strength of the class-specific shift.
    pub class_shift: f64,
    /// Dirichlet concentration of the shared word proportions; small values
    /// give a few frequent and many rare words.
    pub base_concentration: f64,
    /// Spread of the word codebook and noise around each codeword.
    pub codebook_scale: f64,
    pub word_noise: f64,
    /// Normal-Gamma prior of the latent MoG kind: `β`, `a`, `b`.
    pub beta: f64,
    pub gamma_shape: f64,
    pub gamma_rate: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, seed: u64) -> Self {
        SynthSpec {
            kind,
            n_classes: 2,
            train_per_class: 50,
            test_per_class: 50,
            descriptors_per_image: 200,
            vocab_size: 16,
            dim: 8,
            topics: 4,
            precision: 2.0,
            class_shift: 1.0,
            base_concentration: 5.0,
            codebook_scale: 5.0,
            word_noise: 0.2,
            beta: 0.5,
            gamma_shape: 5.0,
            gamma_rate: 5.0,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let counts = [
            self.n_classes,
            self.train_per_class + self.test_per_class,
            self.descriptors_per_image,
            self.vocab_size,
            self.dim,
            self.topics,
        ];
        if counts.contains(&0) {
            return Err(Error::invalid("synthetic corpus sizes must be at least 1"));
        }
        let positive = [
            self.precision,
            self.base_concentration,
            self.beta,
            self.gamma_shape,
            self.gamma_rate,
        ];
        if positive.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid("synthetic priors must be positive"));
        }
        if !(self.word_noise >= 0.0) || !(self.codebook_scale >= 0.0) || !self.class_shift.is_finite() {
            return Err(Error::invalid("bad synthetic scales"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthImage {
    pub set: DescriptorSet,
    pub class: usize,
    pub split: Split,
    /// Word counts for the count-model kinds (component counts for the latent
    /// MoG kind).
    pub counts: CountVector,
}

/// Draws from `Dir(alpha)` through log-Gamma variates, which stay accurate
/// for tiny shapes where plain Gamma draws underflow to zero.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: ArrayView1<f64>) -> Array1<f64> {
    let logs: Vec<f64> = alpha
        .iter()
        .map(|&a| {
            let g: f64 = Gamma::new(a + 1.0, 1.0).expect("positive shape").sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / a
        })
        .collect();
    let lse = log_sum_exp(&logs);
    Array1::from_iter(logs.iter().map(|l| (l - lse).exp()))
}

/// Multinomial draw via sequential conditional binomials.
pub fn sample_multinomial<R: Rng + ?Sized>(rng: &mut R, n: usize, p: ArrayView1<f64>) -> Array1<f64> {
    let mut counts = Array1::zeros(p.len());
    let mut remaining = n as u64;
    let mut mass = 1.0;
    for k in 0..p.len() {
        if remaining == 0 {
            break;
        }
        if k + 1 == p.len() {
            counts[k] = remaining as f64;
            break;
        }
        let q = (p[k] / mass).clamp(0.0, 1.0);
        let c = Binomial::new(remaining, q).expect("valid probability").sample(rng);
        counts[k] = c as f64;
        remaining -= c;
        mass = (mass - p[k]).max(0.0);
        if mass <= 0.0 {
            break;
        }
    }
    counts
}

struct ClassPriors {
    /// Mean word (or component) proportions per class, `C × K`.
    proportions: Array2<f64>,
    /// Topic-word distributions shared by all classes (topic kinds).
    topics: Array2<f64>,
    /// Per-class topic proportions (topic kinds), `C × T`.
    topic_means: Array2<f64>,
    /// Codewords (count kinds) or prior component means per class
    /// (latent MoG kind, `C·K × D`).
    centers: Array2<f64>,
}

fn class_priors(spec: &SynthSpec) -> ClassPriors {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX);
    let (c, k, d, t) = (spec.n_classes, spec.vocab_size, spec.dim, spec.topics);
    let base = sample_dirichlet(&mut rng, Array1::from_elem(k, spec.base_concentration).view());
    let mut proportions = Array2::zeros((c, k));
    for cls in 0..c {
        let shift: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let w: Vec<f64> = (0..k).map(|j| base[j] * (spec.class_shift * shift[j]).exp()).collect();
        let total: f64 = w.iter().sum();
        for j in 0..k {
            proportions[[cls, j]] = w[j] / total;
        }
    }
    let mut topics = Array2::zeros((t, k));
    for z in 0..t {
        topics.row_mut(z).assign(&sample_dirichlet(&mut rng, Array1::from_elem(k, 0.5).view()));
    }
    let mut topic_means = Array2::zeros((c, t));
    for cls in 0..c {
        let w: Vec<f64> = (0..t)
            .map(|_| (spec.class_shift * rng.sample::<f64, _>(StandardNormal)).exp())
            .collect();
        let total: f64 = w.iter().sum();
        for z in 0..t {
            topic_means[[cls, z]] = w[z] / total;
        }
    }
    let centers = match spec.kind {
        SynthKind::LatMog => {
            let shared = Array2::from_shape_fn((k, d), |_| spec.codebook_scale * rng.sample::<f64, _>(StandardNormal));
            let mut centers = Array2::zeros((c * k, d));
            for cls in 0..c {
                for j in 0..k {
                    for dd in 0..d {
                        let offset = spec.class_shift * rng.sample::<f64, _>(StandardNormal);
                        centers[[cls * k + j, dd]] = shared[[j, dd]] + offset;
                    }
                }
            }
            centers
        }
        _ => Array2::from_shape_fn((k, d), |_| spec.codebook_scale * rng.sample::<f64, _>(StandardNormal)),
    };
    ClassPriors {
        proportions,
        topics,
        topic_means,
        centers,
    }
}

fn draw_image(spec: &SynthSpec, priors: &ClassPriors, index: usize, class: usize, split: Split) -> Result<SynthImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let (k, d, n) = (spec.vocab_size, spec.dim, spec.descriptors_per_image);
    let noise = Normal::new(0.0, spec.word_noise.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;

    let mut data = Array2::zeros((n, d));
    let counts = match spec.kind {
        SynthKind::Polya | SynthKind::Plsa | SynthKind::Lda => {
            let word_probs = match spec.kind {
                SynthKind::Polya => {
                    let alpha = priors.proportions.row(class).mapv(|p| (p * spec.precision).max(1e-300));
                    sample_dirichlet(&mut rng, alpha.view())
                }
                SynthKind::Plsa => priors.topic_means.row(class).dot(&priors.topics),
                _ => {
                    let alpha = priors.topic_means.row(class).mapv(|p| (p * spec.precision).max(1e-300));
                    let theta = sample_dirichlet(&mut rng, alpha.view());
                    theta.dot(&priors.topics)
                }
            };
            let counts = sample_multinomial(&mut rng, n, word_probs.view());
            let mut row = 0;
            for (w, &c) in counts.iter().enumerate() {
                for _ in 0..c as usize {
                    for dd in 0..d {
                        data[[row, dd]] = priors.centers[[w, dd]] + noise.sample(&mut rng);
                    }
                    row += 1;
                }
            }
            counts
        }
        SynthKind::LatMog => {
            let alpha = Array1::from_elem(k, spec.precision / k as f64);
            let pi = sample_dirichlet(&mut rng, alpha.view());
            let gamma = Gamma::new(spec.gamma_shape, 1.0 / spec.gamma_rate).map_err(|e| Error::invalid(e.to_string()))?;
            let mut mu = Array2::zeros((k, d));
            let mut sd = Array2::zeros((k, d));
            for j in 0..k {
                for dd in 0..d {
                    let lambda: f64 = gamma.sample(&mut rng).max(1e-12);
                    let z: f64 = rng.sample(StandardNormal);
                    mu[[j, dd]] = priors.centers[[class * k + j, dd]] + z / (spec.beta * lambda).sqrt();
                    sd[[j, dd]] = 1.0 / lambda.sqrt();
                }
            }
            let counts = sample_multinomial(&mut rng, n, pi.view());
            let mut row = 0;
            for (j, &c) in counts.iter().enumerate() {
                for _ in 0..c as usize {
                    for dd in 0..d {
                        let z: f64 = rng.sample(StandardNormal);
                        data[[row, dd]] = mu[[j, dd]] + sd[[j, dd]] * z;
                    }
                    row += 1;
                }
            }
            counts
        }
    };
    // Shuffle rows so that file order does not reveal the words.
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let data = data.select(Axis(0), &order);
    let coords = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>());
    let id = format!("img{index:05}");
    Ok(SynthImage {
        set: DescriptorSet::new(id, data, Some(coords))?,
        class,
        split,
        counts: CountVector::new(counts)?,
    })
}

/// Samples a labelled corpus. Images are generated independently from
/// per-image random streams, so the result does not depend on threading.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<SynthImage>> {
    spec.validate()?;
    let priors = class_priors(spec);
    let per_class = spec.train_per_class + spec.test_per_class;
    let jobs: Vec<(usize, usize, Split)> = (0..spec.n_classes)
        .flat_map(|c| {
            (0..per_class).map(move |i| {
                let split = if i < spec.train_per_class { Split::Train } else { Split::Test };
                (c, i, split)
            })
        })
        .enumerate()
        .map(|(index, (c, _, split))| (index, c, split))
        .collect();
    jobs.par_iter()
        .map(|&(index, class, split)| draw_image(spec, &priors, index, class, split))
        .collect()
}

/// Writes descriptor files under `dir/desc/` and the index at
/// `dir/index.tsv` (with paths relative to `dir`).
pub fn write_synthetic(images: &[SynthImage], dir: &Path) -> Result<DatasetIndex> {
    let desc_dir = dir.join("desc");
    fs::create_dir_all(&desc_dir)?;
    let mut entries = Vec::with_capacity(images.len());
    for img in images {
        let rel = PathBuf::from("desc").join(format!("{}.nifd", img.set.image_id));
        write_descriptor_file(&img.set, &dir.join(&rel))?;
        entries.push(IndexEntry {
            image_id: img.set.image_id.clone(),
            path: rel,
            split: img.split,
            labels: vec![format!("c{}", img.class)],
        });
    }
    let index = DatasetIndex::new(entries)?;
    index.write(&dir.join("index.tsv"))?;
    Ok(index)
}

/// Per-word covariance of a set of count vectors (`K × K`, biased).
pub fn count_covariance(counts: ArrayView2<f64>) -> Array2<f64> {
    let n = counts.nrows() as f64;
    let mean = counts.mean_axis(Axis(0)).expect("non-empty");
    let centered = &counts - &mean;
    centered.t().dot(&centered) / n
}
