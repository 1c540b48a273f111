//! Scores against central finite differences of the functions they
//! differentiate: exact log-likelihoods for the iid and Pólya models, and
//! the variational bound (at a fixed posterior) for LDA and the latent MoG.

mod common;

use common::{central_diff, close, counts, responsibilities, rng, uniform_mat, uniform_vec};
use ndarray::{Array1, Array2};
use noniid::count_models::{
    bow_fisher_score, bow_log_likelihood, polya_fisher_score, polya_log_likelihood, CountVector,
    MultinomialModel, PolyaModel,
};
use noniid::descriptors::DescriptorSet;
use noniid::gmm::{posteriors, sufficient_stats, GaussianMixture, Responsibilities};
use noniid::latent_mog::{
    free_energy, latent_mog_fisher_score, mog_fisher_score, posterior_from_stats, LatentMogModel,
};
use noniid::topic_models::{lda_bound, lda_fisher_score, lda_infer, LdaModel, LdaOptions};
use rand::Rng;

const TOL: f64 = 1e-6;

fn check(grad: &Array1<f64>, f: impl Fn(&[f64]) -> f64, x: &[f64], what: &str) {
    assert_eq!(grad.len(), x.len());
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        let fd = central_diff(&f, x, i, h);
        assert!(close(grad[i], fd, TOL), "{what}[{i}]: analytic {} vs fd {fd}", grad[i]);
    }
}

#[test]
fn polya_score_matches_finite_differences() {
    let mut r = rng(1);
    for _ in 0..100 {
        let k = r.random_range(2..8);
        let alpha = uniform_vec(&mut r, k, 0.05, 5.0);
        let c = CountVector::new(counts(&mut r, k, 20)).unwrap();
        let g = polya_fisher_score(&PolyaModel::new(alpha.clone()).unwrap(), &c).unwrap();
        let f = |x: &[f64]| {
            let m = PolyaModel::new(Array1::from(x.to_vec())).unwrap();
            polya_log_likelihood(&m, &c).unwrap()
        };
        check(&g, f, alpha.as_slice().unwrap(), "polya");
    }
}

#[test]
fn bow_score_matches_finite_differences() {
    let mut r = rng(2);
    for _ in 0..100 {
        let k = r.random_range(2..8);
        let gamma = uniform_vec(&mut r, k, -2.0, 2.0);
        let c = CountVector::new(counts(&mut r, k, 20)).unwrap();
        let model = MultinomialModel { gamma: gamma.clone() };
        let g = bow_fisher_score(&model, &c).unwrap();
        let f = |x: &[f64]| {
            let m = MultinomialModel {
                gamma: Array1::from(x.to_vec()),
            };
            bow_log_likelihood(&m, &c).unwrap()
        };
        check(&g, f, gamma.as_slice().unwrap(), "bow");
    }
}

fn mog_from(x: &[f64], k: usize, d: usize) -> GaussianMixture {
    let gamma = &x[..k];
    let max = gamma.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = gamma.iter().map(|g| (g - max).exp()).collect();
    let s: f64 = w.iter().sum();
    let weights = Array1::from_iter(w.iter().map(|v| v / s));
    let means = Array2::from_shape_vec((k, d), x[k..k + k * d].to_vec()).unwrap();
    let variances = Array2::from_shape_vec((k, d), x[k + k * d..].iter().map(|l| 1.0 / l).collect()).unwrap();
    GaussianMixture::new(weights, means, variances).unwrap()
}

#[test]
fn mog_score_matches_finite_differences() {
    let mut r = rng(3);
    for _ in 0..100 {
        let (k, d, n) = (r.random_range(1..5), r.random_range(1..4), r.random_range(1..30));
        let mut x = uniform_vec(&mut r, k, -1.0, 1.0).to_vec();
        x.extend(uniform_vec(&mut r, k * d, -2.0, 2.0));
        x.extend(uniform_vec(&mut r, k * d, 0.3, 3.0));
        let data = uniform_mat(&mut r, n, d, -3.0, 3.0);
        let set = DescriptorSet::new("x", data.clone(), None).unwrap();
        let model = mog_from(&x, k, d);
        let stats = sufficient_stats(&posteriors(&model, &set).unwrap(), &set).unwrap();
        let g = mog_fisher_score(&model, &stats).unwrap();
        let f = |p: &[f64]| {
            let m = mog_from(p, k, d);
            data.rows().into_iter().map(|row| m.log_density(row)).sum::<f64>()
        };
        check(&g, f, &x, "mog");
    }
}

#[test]
fn lda_score_matches_bound_differences() {
    let mut r = rng(4);
    for _ in 0..100 {
        let (t, k) = (r.random_range(1..4), r.random_range(2..7));
        let alpha = uniform_vec(&mut r, t, 0.1, 3.0);
        let eta = uniform_mat(&mut r, t, k, 0.1, 3.0);
        let model = LdaModel::new(alpha.clone(), eta.clone()).unwrap();
        let c = CountVector::new(counts(&mut r, k, 15)).unwrap();
        let post = lda_infer(&model, &c, LdaOptions::default()).unwrap();
        let g = lda_fisher_score(&model, &post);
        let mut x = alpha.to_vec();
        x.extend(eta.iter());
        let f = |p: &[f64]| {
            let m = LdaModel::new(
                Array1::from(p[..t].to_vec()),
                Array2::from_shape_vec((t, k), p[t..].to_vec()).unwrap(),
            )
            .unwrap();
            lda_bound(&m, &c, post.alpha_star.view(), post.eta_star.view(), post.q_word_topic.view())
        };
        check(&g, f, &x, "lda");
    }
}

fn latmog_from(p: &[f64], k: usize, d: usize) -> LatentMogModel {
    let kd = k * d;
    let block = |i: usize| Array2::from_shape_vec((k, d), p[k + i * kd..k + (i + 1) * kd].to_vec()).unwrap();
    LatentMogModel::new(Array1::from(p[..k].to_vec()), block(0), block(1), block(2), block(3)).unwrap()
}

#[test]
fn latent_mog_score_matches_bound_differences() {
    let mut r = rng(5);
    for _ in 0..100 {
        let (k, d, n) = (r.random_range(1..5), r.random_range(1..4), r.random_range(0..40));
        let mut x = uniform_vec(&mut r, k, 0.2, 4.0).to_vec();
        x.extend(uniform_vec(&mut r, k * d, -2.0, 2.0));
        x.extend(uniform_vec(&mut r, k * d, 0.2, 3.0));
        x.extend(uniform_vec(&mut r, k * d, 0.5, 4.0));
        x.extend(uniform_vec(&mut r, k * d, 0.5, 4.0));
        let model = latmog_from(&x, k, d);
        let set = DescriptorSet::new("x", uniform_mat(&mut r, n, d, -3.0, 3.0), None).unwrap();
        let q = Responsibilities(responsibilities(&mut r, n, k));
        let stats = sufficient_stats(&q, &set).unwrap();
        let post = posterior_from_stats(&model, &stats).unwrap();
        let h = q.entropy();
        let g = latent_mog_fisher_score(&model, &post);
        let f = |p: &[f64]| free_energy(&latmog_from(p, k, d), &post, &stats, h).unwrap();
        check(&g, f, &x, "latmog");
    }
}
