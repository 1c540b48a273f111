#![allow(dead_code)]

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central difference of `f` around `x` in coordinate `i`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    plus[i] += h;
    minus[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// `|a − b| ≤ tol · max(1, |b|)`.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

pub fn uniform_vec(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Array1<f64> {
    Array1::from_iter((0..n).map(|_| rng.random_range(lo..hi)))
}

pub fn uniform_mat(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(lo..hi))
}

pub fn counts(rng: &mut impl Rng, k: usize, max: u32) -> Array1<f64> {
    Array1::from_iter((0..k).map(|_| {
        if rng.random_bool(0.3) {
            0.0
        } else {
            rng.random_range(0..=max) as f64
        }
    }))
}

/// Random responsibilities (rows on the simplex).
pub fn responsibilities(rng: &mut impl Rng, n: usize, k: usize) -> Array2<f64> {
    let mut q = uniform_mat(rng, n, k, 0.01, 1.0);
    for mut row in q.rows_mut() {
        let s = row.sum();
        row /= s;
    }
    q
}
