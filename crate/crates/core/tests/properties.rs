//! Algebraic invariants checked on randomly generated inputs.

mod common;

use common::{rng, uniform_mat};
use ndarray::{Array1, Array2};
use noniid::count_models::{
    bow_fisher_score, polya_fisher_score, polya_log_likelihood, CountVector, MultinomialModel, PolyaModel,
};
use noniid::descriptors::DescriptorSet;
use noniid::encoder::{l2_normalize, power_normalize, Pipeline, ScoreModel, SpmGrid};
use noniid::eval::average_precision_interpolated;
use noniid::gmm::{clip_posteriors, sufficient_stats, GaussianMixture, Responsibilities, SufficientStats};
use noniid::latent_mog::{latent_mog_fisher_score, posterior_from_stats, LatentMogModel};
use noniid::specfun::{digamma, ln_gamma};
use noniid::topic_models::{lda_fisher_score, lda_infer, LdaModel, LdaOptions};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn simplex_rows(raw: Vec<f64>, k: usize) -> Array2<f64> {
    let mut q = Array2::from_shape_vec((raw.len() / k, k), raw).unwrap();
    for mut row in q.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    q
}

fn kl(p: ndarray::ArrayView1<f64>, q: ndarray::ArrayView1<f64>) -> f64 {
    p.iter().zip(q).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum()
}

proptest! {
    #[test]
    fn digamma_recurrence(x in 1e-3f64..1e3) {
        let lhs = digamma(x + 1.0) - digamma(x) - 1.0 / x;
        prop_assert!(lhs.abs() <= 1e-10 * (1.0 / x).max(1.0), "x={x}: {lhs}");
    }

    #[test]
    fn ln_gamma_recurrence(x in 1e-3f64..1e3) {
        let lhs = ln_gamma(x + 1.0) - ln_gamma(x) - x.ln();
        prop_assert!(lhs.abs() <= 1e-10 * ln_gamma(x).abs().max(1.0), "x={x}: {lhs}");
    }

    #[test]
    fn sufficient_stats_are_linear_in_responsibilities(
        seed in any::<u64>(), n in 1usize..30, k in 1usize..5, d in 1usize..4, lam in 0.0f64..1.0,
    ) {
        let mut r = rng(seed);
        let set = DescriptorSet::new("x", uniform_mat(&mut r, n, d, -3.0, 3.0), None).unwrap();
        let q1 = simplex_rows(uniform_mat(&mut r, n, k, 0.01, 1.0).into_raw_vec_and_offset().0, k);
        let q2 = simplex_rows(uniform_mat(&mut r, n, k, 0.01, 1.0).into_raw_vec_and_offset().0, k);
        let mix = &q1 * lam + &q2 * (1.0 - lam);
        let s1 = sufficient_stats(&Responsibilities(q1), &set).unwrap();
        let s2 = sufficient_stats(&Responsibilities(q2), &set).unwrap();
        let sm = sufficient_stats(&Responsibilities(mix), &set).unwrap();
        let check = |a: &Array2<f64>, b: &Array2<f64>, m: &Array2<f64>| {
            m.iter().zip(a.iter().zip(b)).all(|(m, (a, b))| (m - (lam * a + (1.0 - lam) * b)).abs() <= 1e-9 * m.abs().max(1.0))
        };
        prop_assert!(check(&s1.s1, &s2.s1, &sm.s1));
        prop_assert!(check(&s1.s2, &s2.s2, &sm.s2));
        let s0 = |s: &SufficientStats| s.s0.clone().insert_axis(ndarray::Axis(0));
        prop_assert!(check(&s0(&s1), &s0(&s2), &s0(&sm)));
    }

    #[test]
    fn clipping_kl_decreases_with_kept_components(raw in prop::collection::vec(1e-3f64..1.0, 8 * 6)) {
        let q = Responsibilities(simplex_rows(raw, 6));
        let same = clip_posteriors(&q, 6).unwrap();
        prop_assert!(same.0.iter().zip(q.0.iter()).all(|(a, b)| (a - b).abs() <= 1e-15));
        for i in 0..q.len() {
            let mut prev = f64::INFINITY;
            for kp in 1..=6 {
                let c = clip_posteriors(&q, kp).unwrap();
                let d = kl(c.0.row(i), q.0.row(i));
                prop_assert!(d <= prev + 1e-12);
                prev = d;
            }
        }
    }

    #[test]
    fn polya_is_exchangeable(seed in any::<u64>(), k in 2usize..10) {
        let mut r = rng(seed);
        let alpha = common::uniform_vec(&mut r, k, 0.05, 5.0);
        let n = common::counts(&mut r, k, 20);
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut r);
        let pa = Array1::from_iter(perm.iter().map(|&i| alpha[i]));
        let pn = Array1::from_iter(perm.iter().map(|&i| n[i]));
        let m = PolyaModel::new(alpha).unwrap();
        let pm = PolyaModel::new(pa).unwrap();
        let c = CountVector::new(n).unwrap();
        let pc = CountVector::new(pn).unwrap();
        let ll = polya_log_likelihood(&m, &c).unwrap();
        let pll = polya_log_likelihood(&pm, &pc).unwrap();
        prop_assert!((ll - pll).abs() <= 1e-10 * ll.abs().max(1.0));
        let g = polya_fisher_score(&m, &c).unwrap();
        let pg = polya_fisher_score(&pm, &pc).unwrap();
        for (j, &i) in perm.iter().enumerate() {
            prop_assert!((pg[j] - g[i]).abs() <= 1e-10 * g[i].abs().max(1.0));
        }
    }

    #[test]
    fn lda_scores_follow_topic_permutations(seed in any::<u64>(), t in 2usize..5, k in 2usize..8) {
        let mut r = rng(seed);
        let alpha = common::uniform_vec(&mut r, t, 0.1, 3.0);
        let eta = uniform_mat(&mut r, t, k, 0.1, 3.0);
        let c = CountVector::new(common::counts(&mut r, k, 20)).unwrap();
        let mut perm: Vec<usize> = (0..t).collect();
        perm.shuffle(&mut r);
        let pa = Array1::from_iter(perm.iter().map(|&i| alpha[i]));
        let pe = Array2::from_shape_fn((t, k), |(z, w)| eta[[perm[z], w]]);
        // A negative tol never triggers, so both orderings run the same sweeps.
        // Convergence checks can stop them apart on flat bounds.
        let opts = LdaOptions { tol: -1.0, max_iter: 300 };
        let m = LdaModel::new(alpha, eta).unwrap();
        let pm = LdaModel::new(pa, pe).unwrap();
        let g = lda_fisher_score(&m, &lda_infer(&m, &c, opts).unwrap());
        let pg = lda_fisher_score(&pm, &lda_infer(&pm, &c, opts).unwrap());
        for (z, &src) in perm.iter().enumerate() {
            prop_assert!((pg[z] - g[src]).abs() <= 1e-6, "alpha block");
            for w in 0..k {
                prop_assert!((pg[t + z * k + w] - g[t + src * k + w]).abs() <= 1e-6, "eta block");
            }
        }
    }

    #[test]
    fn ap_is_invariant_to_monotone_transforms(seed in any::<u64>(), n in 2usize..60) {
        let mut r = rng(seed);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let relevant: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        let moved: Vec<f64> = scores.iter().map(|s| 3.0 * (s / 2.0).exp() + 1.0).collect();
        prop_assume!(relevant.iter().any(|v| *v));
        let relevant = Array1::from(relevant);
        let a = average_precision_interpolated(Array1::from(scores).view(), relevant.view()).unwrap();
        let b = average_precision_interpolated(Array1::from(moved).view(), relevant.view()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn power_normalization_is_odd_and_monotone(
        v in prop::collection::vec(-10f64..10.0, 1..30), rho in 0.0f64..=1.0,
    ) {
        let x = Array1::from(v.clone());
        let f = power_normalize(x.view(), rho).unwrap();
        let g = power_normalize((-&x).view(), rho).unwrap();
        prop_assert!(f.iter().zip(&g).all(|(a, b)| *a == -*b));
        let mut sorted = v.clone();
        sorted.sort_by(f64::total_cmp);
        let fs = power_normalize(Array1::from(sorted).view(), rho).unwrap();
        prop_assert!(fs.windows(2).into_iter().all(|w| w[0] <= w[1]));
    }

    #[test]
    fn l2_output_has_unit_norm(v in prop::collection::vec(-1e3f64..1e3, 1..30)) {
        let x = Array1::from(v);
        let y = l2_normalize(x.view());
        if x.iter().all(|v| *v == 0.0) {
            prop_assert!(y.iter().all(|v| *v == 0.0));
        } else {
            prop_assert!((y.dot(&y).sqrt() - 1.0).abs() <= 1e-12);
        }
    }

    // Only the zero-order statistics enter the β and a posterior updates.
    #[test]
    fn beta_and_a_updates_depend_only_on_counts(seed in any::<u64>(), k in 1usize..4, d in 1usize..4) {
        let mut r = rng(seed);
        let model = LatentMogModel::new(
            common::uniform_vec(&mut r, k, 0.2, 4.0),
            uniform_mat(&mut r, k, d, -2.0, 2.0),
            uniform_mat(&mut r, k, d, 0.2, 3.0),
            uniform_mat(&mut r, k, d, 0.5, 4.0),
            uniform_mat(&mut r, k, d, 0.5, 4.0),
        ).unwrap();
        let s0 = common::uniform_vec(&mut r, k, 0.0, 20.0);
        let make = |r: &mut rand_chacha::ChaCha8Rng| {
            let s1 = uniform_mat(r, k, d, -5.0, 5.0);
            let s2 = Array2::from_shape_fn((k, d), |(c, j)| s1[[c, j]].powi(2) / s0[c].max(1e-9) + r.random_range(0.0..10.0));
            SufficientStats { s0: s0.clone(), s1, s2 }
        };
        let p = posterior_from_stats(&model, &make(&mut r)).unwrap();
        let q = posterior_from_stats(&model, &make(&mut r)).unwrap();
        prop_assert_eq!(p.beta_star, q.beta_star);
        prop_assert_eq!(p.a_star, q.a_star);
        prop_assert_eq!(p.alpha_star, q.alpha_star);
    }

    // n copies of one descriptor: the m-gradient grows with n with shrinking
    // increments.
    #[test]
    fn mean_gradient_discounts_repetitions(
        a in 1.0f64..5.0, b in 0.5f64..2.0, beta in 0.1f64..1.9, m in -1.0f64..1.0, delta in 0.1f64..3.0,
    ) {
        let model = LatentMogModel::new(
            Array1::from_elem(1, 1.0),
            Array2::from_elem((1, 1), m),
            Array2::from_elem((1, 1), beta),
            Array2::from_elem((1, 1), a),
            Array2::from_elem((1, 1), b),
        ).unwrap();
        let x = m + delta;
        let grad = |n: f64| {
            let stats = SufficientStats {
                s0: Array1::from_elem(1, n),
                s1: Array2::from_elem((1, 1), n * x),
                s2: Array2::from_elem((1, 1), n * x * x),
            };
            latent_mog_fisher_score(&model, &posterior_from_stats(&model, &stats).unwrap())[1]
        };
        let values: Vec<f64> = (0..=50).map(|n| grad(n as f64)).collect();
        let inc: Vec<f64> = values.windows(2).map(|w| w[1] - w[0]).collect();
        prop_assert!(inc.iter().all(|v| *v > 0.0));
        prop_assert!(inc.windows(2).all(|w| w[1] < w[0]), "{inc:?}");
    }
}

#[test]
fn huge_alpha_polya_score_tracks_bow() {
    let mut r = rng(30);
    let k = 12;
    let alpha = Array1::from_elem(k, 1e6);
    let polya = PolyaModel::new(alpha.clone()).unwrap();
    let bow = MultinomialModel::from_probabilities((&alpha / alpha.sum()).view()).unwrap();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for _ in 0..200 {
        let c = CountVector::new(common::counts(&mut r, k, 50)).unwrap();
        xs.extend(polya_fisher_score(&polya, &c).unwrap());
        ys.extend(bow_fisher_score(&bow, &c).unwrap());
    }
    let corr = pearson(&xs, &ys);
    assert!(corr >= 0.999, "correlation {corr}");
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn single_cell_grid_matches_whole_image() {
    let mut r = rng(31);
    let (k, d, n) = (4, 3, 80);
    let vocab = GaussianMixture::new(
        Array1::from_elem(k, 0.25),
        uniform_mat(&mut r, k, d, -2.0, 2.0),
        uniform_mat(&mut r, k, d, 0.5, 2.0),
    )
    .unwrap();
    let coords = uniform_mat(&mut r, n, 2, 0.0, 1.0);
    let set = DescriptorSet::new("x", uniform_mat(&mut r, n, d, -3.0, 3.0), Some(coords)).unwrap();
    let models = [
        ScoreModel::Polya(PolyaModel::new(Array1::from_elem(k, 0.5)).unwrap()),
        ScoreModel::Mog,
    ];
    for model in models {
        let mut p = Pipeline {
            vocab: vocab.clone(),
            model,
            clip: None,
            spm: Some(SpmGrid::from_levels(&[(1, 1)]).unwrap()),
            whitening: None,
            rho: 0.5,
        };
        let gridded = noniid::encoder::encode_image(&p, &set).unwrap();
        p.spm = None;
        let whole = noniid::encoder::encode_image(&p, &set).unwrap();
        assert_eq!(gridded.values, whole.values);
        assert_eq!(gridded.layout, whole.layout);
    }
}
