mod common;

use common::rng;
use ndarray::{Array1, Array2};
use noniid::eval::{average_precision_interpolated, bootstrap_compare, Labels, Metric};
use rand::Rng;

/// 11-point AP by counting, for every score threshold, the items at or
/// above it.
fn ap_by_thresholds(scores: &[f64], relevant: &[bool]) -> f64 {
    let n_rel = relevant.iter().filter(|r| **r).count() as f64;
    let points: Vec<(f64, f64)> = scores
        .iter()
        .map(|&s| {
            let retrieved: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= s).collect();
            let hits = retrieved.iter().filter(|&&i| relevant[i]).count() as f64;
            (hits / n_rel, hits / retrieved.len() as f64)
        })
        .collect();
    (0..=10)
        .map(|t| {
            points
                .iter()
                .filter(|(r, _)| *r >= t as f64 / 10.0 - 1e-12)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

#[test]
fn ap_matches_threshold_scan() {
    let mut r = rng(70);
    for _ in 0..200 {
        let n = r.random_range(1..80);
        let scores: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let mut relevant: Vec<bool> = (0..n).map(|_| r.random_bool(0.3)).collect();
        relevant[0] = true;
        let got = average_precision_interpolated(Array1::from(scores.clone()).view(), Array1::from(relevant.clone()).view())
            .unwrap();
        let want = ap_by_thresholds(&scores, &relevant);
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

fn one_hot(predicted: &[usize], k: usize) -> Array2<f64> {
    let mut s = Array2::zeros((predicted.len(), k));
    for (i, &p) in predicted.iter().enumerate() {
        s[[i, p]] = 1.0;
    }
    s
}

#[test]
fn bootstrap_separates_a_large_gap() {
    let mut r = rng(71);
    let n = 400;
    let truth: Vec<usize> = (0..n).map(|i| i % 2).collect();
    // System A is right 85% of the time, system B 65%.
    let guess = |r: &mut rand_chacha::ChaCha8Rng, acc: f64| -> Vec<usize> {
        truth.iter().map(|&t| if r.random_bool(acc) { t } else { 1 - t }).collect()
    };
    let a = one_hot(&guess(&mut r, 0.85), 2);
    let b = one_hot(&guess(&mut r, 0.65), 2);
    let labels = Labels::single_label(&truth, 2).unwrap();
    let res = bootstrap_compare(a.view(), b.view(), &labels, Metric::Accuracy, 1000, 5).unwrap();
    assert!(!res.equivalent);
    assert!(res.ci.0 > 0.0 && res.ci.0 <= res.delta && res.delta <= res.ci.1, "{res:?}");
    assert!((res.delta - 0.2).abs() < 0.08, "{res:?}");
    let again = bootstrap_compare(a.view(), b.view(), &labels, Metric::Accuracy, 1000, 5).unwrap();
    assert_eq!(res, again);
    assert!(bootstrap_compare(a.view(), b.view(), &labels, Metric::Accuracy, 99, 5).is_err());
}
