//! Model fits and likelihoods against Monte-Carlo estimates and the
//! generators that produced the data.

mod common;

use common::{central_diff, counts, rng, uniform_mat};
use ndarray::{Array1, Array2};
use noniid::count_models::{polya_log_likelihood, CountVector, PolyaModel};
use noniid::descriptors::DescriptorSet;
use noniid::gmm::{sufficient_stats, train_gmm, GaussianMixture, GmmOptions, Responsibilities, SufficientStats};
use noniid::latent_mog::{init_latent_mog, summed_bound, train_latent_mog, LatentMogModel, TrainOptions};
use noniid::study::{sample_dirichlet, sample_multinomial};
use noniid::topic_models::{
    fit_lda_from_plsa, fold_in, plsa_fisher_score, plsa_log_likelihood, train_plsa, PlsaModel, PlsaOptions,
};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};

#[test]
fn polya_likelihood_matches_monte_carlo() {
    let mut r = rng(50);
    let alpha = Array1::from(vec![2.0, 1.0, 0.5]);
    let n = [4.0, 0.0, 1.0];
    let draws = 1_000_000;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..draws {
        let pi = sample_dirichlet(&mut r, alpha.view());
        let p: f64 = (0..3).map(|k| pi[k].powf(n[k])).product();
        sum += p;
        sum_sq += p * p;
    }
    let mean = sum / draws as f64;
    let sd = ((sum_sq / draws as f64 - mean * mean) / draws as f64).sqrt();
    let exact = polya_log_likelihood(&PolyaModel::new(alpha).unwrap(), &CountVector::new(Array1::from(n.to_vec())).unwrap())
        .unwrap()
        .exp();
    assert!((exact - mean).abs() <= 3.0 * sd, "{exact} vs {mean} ± {sd}");
}

#[test]
fn gmm_reaches_generator_likelihood() {
    let mut r = rng(51);
    let truth = GaussianMixture::new(
        Array1::from(vec![0.2, 0.3, 0.5]),
        Array2::from_shape_vec((3, 2), vec![-4.0, 0.0, 0.0, 3.0, 4.0, -1.0]).unwrap(),
        Array2::from_shape_vec((3, 2), vec![1.0, 0.5, 0.7, 1.2, 1.5, 0.8]).unwrap(),
    )
    .unwrap();
    let noise = Normal::new(0.0, 1.0).unwrap();
    let n = 5000;
    let mut x = Array2::zeros((n, 2));
    for mut row in x.rows_mut() {
        let u: f64 = r.random();
        let k = if u < 0.2 { 0 } else if u < 0.5 { 1 } else { 2 };
        for j in 0..2 {
            row[j] = truth.means[[k, j]] + truth.variances[[k, j]].sqrt() * noise.sample(&mut r);
        }
    }
    let fit = train_gmm(x.view(), &GmmOptions::new(3, 7)).unwrap();
    let got = fit.model.mean_log_likelihood(x.view());
    let generator = truth.mean_log_likelihood(x.view());
    assert!(got >= generator - 0.01, "{got} vs generator {generator}");
}

fn disjoint_corpus(r: &mut impl Rng) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let topics = Array2::from_shape_vec(
        (2, 6),
        vec![0.5, 0.3, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.2, 0.2, 0.6],
    )
    .unwrap();
    let docs = 200;
    let mut x = Array2::zeros((docs, 6));
    let mut thetas = Array2::zeros((docs, 2));
    for d in 0..docs {
        let theta = sample_dirichlet(r, Array1::from(vec![1.0, 1.0]).view());
        let p = theta.dot(&topics);
        x.row_mut(d).assign(&sample_multinomial(r, 100, p.view()));
        thetas.row_mut(d).assign(&theta);
    }
    (x, topics, thetas)
}

#[test]
fn plsa_recovers_disjoint_topics() {
    let mut r = rng(52);
    let (x, topics, thetas) = disjoint_corpus(&mut r);
    let fit = train_plsa(x.view(), &PlsaOptions::new(2, 3)).unwrap();
    let support = |t: usize| -> Vec<bool> { topics.row(t).iter().map(|p| *p > 0.0).collect() };
    let mass = |row: ndarray::ArrayView1<f64>, sup: &[bool]| -> f64 { row.iter().zip(sup).filter(|(_, s)| **s).map(|(p, _)| p).sum() };
    let direct = mass(fit.model.topic_word.row(0), &support(0)).min(mass(fit.model.topic_word.row(1), &support(1)));
    let swapped = mass(fit.model.topic_word.row(0), &support(1)).min(mass(fit.model.topic_word.row(1), &support(0)));
    assert!(direct.max(swapped) >= 0.99, "support mass {direct} / {swapped}");

    let tokens = x.sum();
    let generator: f64 = (0..x.nrows())
        .map(|d| {
            let m = PlsaModel::new(topics.clone(), Array1::from(vec![0.5, 0.5])).unwrap();
            plsa_log_likelihood(&m, thetas.row(d), &CountVector::new(x.row(d).to_owned()).unwrap())
        })
        .sum();
    let got = *fit.trace.last().unwrap();
    assert!(got >= generator - 0.02 * tokens, "{got} vs generator {generator}");
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.mapv(f64::exp);
    for mut row in p.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    p
}

#[test]
fn plsa_score_matches_refolded_differences() {
    let mut r = rng(53);
    let mut tested = 0;
    while tested < 20 {
        let (t, k) = (r.random_range(2..4), r.random_range(3..7));
        let topic_logits = uniform_mat(&mut r, t, k, -1.0, 1.0);
        let init = Array1::from_elem(t, 1.0 / t as f64);
        let model = PlsaModel::new(softmax_rows(&topic_logits), init.clone()).unwrap();
        let c = CountVector::new(counts(&mut r, k, 20) + 1.0).unwrap();
        // EM creeps towards mixtures on the boundary of the simplex, so the
        // folded-in point is only accurate for interior optima.
        let theta = fold_in(&model, &c, 1e-13, 1_000_000).unwrap().theta;
        if theta.iter().any(|v| *v < 1e-3) {
            continue;
        }
        tested += 1;
        let score = plsa_fisher_score(&model, &c).unwrap();

        // Topic logits: the image mixture is folded in again at every
        // perturbation.
        let refolded = |p: &[f64]| {
            let logits = Array2::from_shape_vec((t, k), p.to_vec()).unwrap();
            let m = PlsaModel::new(softmax_rows(&logits), init.clone()).unwrap();
            fold_in(&m, &c, 1e-13, 1_000_000).unwrap().log_likelihood
        };
        let x: Vec<f64> = topic_logits.iter().cloned().collect();
        for i in 0..x.len() {
            let fd = central_diff(&refolded, &x, i, 1e-4);
            assert!((score[t + i] - fd).abs() <= 1e-5 * fd.abs().max(1.0), "pi[{i}]: {} vs {fd}", score[t + i]);
        }

        // Mixture logits at the folded-in point, topics fixed.
        let at_theta = |p: &[f64]| {
            let l = Array2::from_shape_vec((1, t), p.to_vec()).unwrap();
            plsa_log_likelihood(&model, softmax_rows(&l).row(0), &c)
        };
        let theta_logits: Vec<f64> = theta.iter().map(|v| v.ln()).collect();
        let at = noniid::topic_models::plsa_fisher_score_at(&model, theta.view(), &c).unwrap();
        for i in 0..t {
            let fd = central_diff(&at_theta, &theta_logits, i, 1e-5);
            assert!((at[i] - fd).abs() <= 1e-5 * fd.abs().max(1.0), "theta[{i}]: {} vs {fd}", at[i]);
            assert!((score[i] - at[i]).abs() <= 1e-5);
        }
    }
}

#[test]
fn lda_document_prior_recovered_from_plsa_mixtures() {
    let mut r = rng(54);
    let alpha0 = Array1::from(vec![2.0, 3.0, 5.0]);
    let (t, k, m) = (3, 8, 20_000);
    let topics = softmax_rows(&uniform_mat(&mut r, t, k, -2.0, 2.0));
    let plsa = PlsaModel::new(topics.clone(), Array1::from_elem(t, 1.0 / 3.0)).unwrap();
    let mut thetas = Array2::zeros((m, t));
    let mut x = Array2::zeros((m, k));
    for d in 0..m {
        let theta = sample_dirichlet(&mut r, alpha0.view());
        x.row_mut(d).assign(&sample_multinomial(&mut r, 50, theta.dot(&topics).view()));
        thetas.row_mut(d).assign(&theta);
    }
    let fit = fit_lda_from_plsa(&plsa, thetas.view(), x.view()).unwrap();
    for i in 0..t {
        let rel = (fit.model.alpha[i] - alpha0[i]).abs() / alpha0[i];
        assert!(rel <= 0.1, "alpha[{i}] = {}", fit.model.alpha[i]);
    }
}

/// Images from the latent MoG generative process with hard assignments.
fn latent_mog_corpus(truth: &LatentMogModel, images: usize, per_image: usize, seed: u64) -> Vec<SufficientStats> {
    let mut r = rng(seed);
    let (k, d) = truth.m.dim();
    let noise = Normal::new(0.0, 1.0).unwrap();
    (0..images)
        .map(|i| {
            let pi = sample_dirichlet(&mut r, truth.alpha.view());
            let lambda = Array2::from_shape_fn((k, d), |(c, j)| {
                Gamma::new(truth.a[[c, j]], 1.0 / truth.b[[c, j]]).unwrap().sample(&mut r)
            });
            let mu = Array2::from_shape_fn((k, d), |(c, j)| {
                truth.m[[c, j]] + noise.sample(&mut r) / (truth.beta[[c, j]] * lambda[[c, j]]).sqrt()
            });
            let z = sample_multinomial(&mut r, per_image, pi.view());
            let mut x = Array2::zeros((per_image, d));
            let mut q = Array2::zeros((per_image, k));
            let mut row = 0;
            for c in 0..k {
                for _ in 0..z[c] as usize {
                    for j in 0..d {
                        x[[row, j]] = mu[[c, j]] + noise.sample(&mut r) / lambda[[c, j]].sqrt();
                    }
                    q[[row, c]] = 1.0;
                    row += 1;
                }
            }
            let set = DescriptorSet::new(format!("i{i}"), x, None).unwrap();
            sufficient_stats(&Responsibilities(q), &set).unwrap()
        })
        .collect()
}

fn generator() -> LatentMogModel {
    LatentMogModel::new(
        Array1::from(vec![2.0, 3.0, 4.0]),
        Array2::from_shape_vec((3, 2), vec![3.0, -4.0, -3.0, 5.0, 6.0, 2.0]).unwrap(),
        Array2::from_elem((3, 2), 2.0),
        Array2::from_elem((3, 2), 6.0),
        Array2::from_elem((3, 2), 3.0),
    )
    .unwrap()
}

#[test]
fn latent_mog_initialization_recovers_generator() {
    let truth = generator();
    let stats = latent_mog_corpus(&truth, 500, 100, 55);
    let init = init_latent_mog(&stats, 16.0).unwrap().model;
    for ((got, want), (ratio, want_ratio)) in init
        .m
        .iter()
        .zip(truth.m.iter())
        .zip((&init.a / &init.b).iter().zip((&truth.a / &truth.b).iter()))
    {
        assert!((got - want).abs() <= 0.1 * want.abs(), "m {got} vs {want}");
        assert!((ratio - want_ratio).abs() <= 0.2 * want_ratio, "a/b {ratio} vs {want_ratio}");
    }
}

#[test]
fn latent_mog_training_reaches_generator_bound() {
    let truth = generator();
    let stats = latent_mog_corpus(&truth, 200, 50, 56);
    let descriptors: f64 = stats.iter().map(SufficientStats::total).sum();
    let init = init_latent_mog(&stats, 4.0).unwrap().model;
    let report = train_latent_mog(&stats, &init, TrainOptions::default()).unwrap();
    let at_truth = summed_bound(&truth, &stats).unwrap();
    let got = *report.trace.last().unwrap();
    assert!(got >= at_truth - 0.05 * descriptors, "{got} vs generator {at_truth}");
}
