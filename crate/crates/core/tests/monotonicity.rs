//! Every iterative fit must not decrease its objective between iterations.

mod common;

use common::{counts, rng, uniform_mat, uniform_vec};
use ndarray::{Array1, Array2};
use noniid::count_models::CountVector;
use noniid::descriptors::DescriptorSet;
use noniid::eval::train_binary_svm;
use noniid::gmm::{image_stats, train_gmm, GmmOptions};
use noniid::latent_mog::{
    infer_latent_mog, init_latent_mog, train_latent_mog, train_latent_mog_with_assignments, InferOptions,
    LatentMogModel, TrainOptions,
};
use noniid::topic_models::{fold_in, lda_infer, train_plsa, LdaModel, LdaOptions, PlsaOptions};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Violations are measured relative to the objective's magnitude.
const SLACK: f64 = 1e-9;

fn assert_non_decreasing(trace: &[f64], skip: &[usize], what: &str) {
    for (i, w) in trace.windows(2).enumerate() {
        if skip.contains(&i) || skip.contains(&(i + 1)) {
            continue;
        }
        let drop = w[0] - w[1];
        assert!(
            drop <= SLACK * w[0].abs().max(1.0),
            "{what}: objective fell by {drop} at iteration {i} ({} -> {})",
            w[0],
            w[1]
        );
    }
}

fn clustered(r: &mut impl Rng, n: usize, d: usize, centers: usize) -> Array2<f64> {
    let c = uniform_mat(r, centers, d, -4.0, 4.0);
    let noise = Normal::new(0.0, 1.0).unwrap();
    Array2::from_shape_fn((n, d), |(i, j)| c[[i % centers, j]] + noise.sample(r))
}

#[test]
fn lda_inference_is_monotone() {
    let mut r = rng(20);
    for _ in 0..100 {
        let (t, k) = (r.random_range(1..6), r.random_range(2..12));
        let model = LdaModel::new(uniform_vec(&mut r, t, 0.05, 3.0), uniform_mat(&mut r, t, k, 0.05, 3.0)).unwrap();
        let c = CountVector::new(counts(&mut r, k, 40)).unwrap();
        let post = lda_infer(&model, &c, LdaOptions::default()).unwrap();
        assert_non_decreasing(&post.trace, &[], "lda_infer");
    }
}

#[test]
fn latent_mog_inference_is_monotone() {
    let mut r = rng(21);
    for _ in 0..100 {
        let (k, d, n) = (r.random_range(1..5), r.random_range(1..4), r.random_range(1..80));
        let model = LatentMogModel::new(
            uniform_vec(&mut r, k, 0.2, 4.0),
            uniform_mat(&mut r, k, d, -2.0, 2.0),
            uniform_mat(&mut r, k, d, 0.2, 3.0),
            uniform_mat(&mut r, k, d, 0.5, 4.0),
            uniform_mat(&mut r, k, d, 0.5, 4.0),
        )
        .unwrap();
        let set = DescriptorSet::new("x", clustered(&mut r, n, d, 3), None).unwrap();
        let post = infer_latent_mog(&model, &set, InferOptions::default()).unwrap();
        assert_non_decreasing(&post.trace, &[], "infer_latent_mog");
    }
}

#[test]
fn plsa_training_and_fold_in_are_monotone() {
    let mut r = rng(22);
    for seed in 0..100 {
        let (m, k, t) = (r.random_range(3..15), r.random_range(3..12), r.random_range(1..4));
        let rows: Vec<Array1<f64>> = (0..m).map(|_| counts(&mut r, k, 20) + 1.0).collect();
        let mut x = Array2::zeros((m, k));
        for (i, row) in rows.iter().enumerate() {
            x.row_mut(i).assign(row);
        }
        let fit = train_plsa(x.view(), &PlsaOptions::new(t, seed)).unwrap();
        assert_non_decreasing(&fit.trace, &fit.reseeded, "train_plsa");
        let test = CountVector::new(counts(&mut r, k, 20)).unwrap();
        let f = fold_in(&fit.model, &test, 1e-10, 200).unwrap();
        assert_non_decreasing(&f.trace, &[], "fold_in");
    }
}

#[test]
fn gmm_em_is_monotone() {
    let mut r = rng(23);
    for seed in 0..100 {
        let (n, d, k) = (r.random_range(40..200), r.random_range(1..5), r.random_range(1..5));
        let x = clustered(&mut r, n, d, 3);
        let fit = train_gmm(x.view(), &GmmOptions::new(k, seed)).unwrap();
        assert_non_decreasing(&fit.trace, &fit.reseeded, "train_gmm");
    }
}

#[test]
fn latent_mog_training_is_monotone() {
    let mut r = rng(24);
    for seed in 0..100 {
        let (k, d) = (r.random_range(1..4), r.random_range(1..3));
        let images = r.random_range(2..6);
        let sets: Vec<DescriptorSet> = (0..images)
            .map(|i| {
                let n = r.random_range(5..30);
                DescriptorSet::new(format!("i{i}"), clustered(&mut r, n, d, 2), None).unwrap()
            })
            .collect();
        let pooled = ndarray::concatenate(ndarray::Axis(0), &sets.iter().map(|s| s.data()).collect::<Vec<_>>()).unwrap();
        let Ok(vocab) = train_gmm(pooled.view(), &GmmOptions::new(k, seed)) else {
            continue;
        };
        let stats: Vec<_> = sets.iter().map(|s| image_stats(&vocab.model, s, None).unwrap()).collect();
        let init = init_latent_mog(&stats, 4.0).unwrap().model;
        let opts = TrainOptions {
            outer_iters: 5,
            ..TrainOptions::default()
        };
        let report = train_latent_mog(&stats, &init, opts).unwrap();
        assert_non_decreasing(&report.trace, &[], "train_latent_mog");
        if seed % 5 == 0 {
            let opts = TrainOptions {
                outer_iters: 3,
                update_assignments: true,
                ..TrainOptions::default()
            };
            let report = train_latent_mog_with_assignments(&sets, &init, opts).unwrap();
            assert_non_decreasing(&report.trace, &[], "train_latent_mog_with_assignments");
        }
    }
}

#[test]
fn svm_dual_objective_never_increases() {
    let mut r = rng(25);
    for seed in 0..100 {
        let (n, d) = (r.random_range(4..60), r.random_range(1..6));
        let x = uniform_mat(&mut r, n, d, -1.0, 1.0);
        let y: Vec<f64> = (0..n).map(|i| if i % 2 == 0 || r.random_bool(0.2) { 1.0 } else { -1.0 }).collect();
        let c = 10f64.powi(r.random_range(-2..3));
        let svm = train_binary_svm(x.view(), &y, c, seed).unwrap();
        let negated: Vec<f64> = svm.dual_trace.iter().map(|v| -v).collect();
        assert_non_decreasing(&negated, &[], "svm dual");
    }
}
