//! Deterministic pairwise reductions.
//!
//! Every sum over descriptors or images goes through these helpers so that the
//! association order depends only on the number of terms, never on how work
//! was scheduled across threads.

use ndarray::{Array1, Array2};
use rayon::prelude::*;

/// Rows per block when accumulating over descriptors in parallel.
pub const BLOCK_ROWS: usize = 512;

/// Pairwise (tree) summation of a slice.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n if n <= 8 => values.iter().sum(),
        n => {
            let (lo, hi) = values.split_at(n / 2);
            pairwise_sum(lo) + pairwise_sum(hi)
        }
    }
}

/// Something that can be merged with another partial result.
pub trait Merge: Sized {
    fn merge(self, other: Self) -> Self;
}

impl Merge for f64 {
    fn merge(self, other: Self) -> Self {
        self + other
    }
}

impl Merge for Array1<f64> {
    fn merge(mut self, other: Self) -> Self {
        self += &other;
        self
    }
}

impl Merge for Array2<f64> {
    fn merge(mut self, other: Self) -> Self {
        self += &other;
        self
    }
}

impl<A: Merge, B: Merge> Merge for (A, B) {
    fn merge(self, other: Self) -> Self {
        (self.0.merge(other.0), self.1.merge(other.1))
    }
}

impl<A: Merge, B: Merge, C: Merge> Merge for (A, B, C) {
    fn merge(self, other: Self) -> Self {
        (
            self.0.merge(other.0),
            self.1.merge(other.1),
            self.2.merge(other.2),
        )
    }
}

/// Merges partial results in a fixed binary tree over their order.
pub fn tree_reduce<T: Merge>(mut parts: Vec<T>) -> Option<T> {
    if parts.is_empty() {
        return None;
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(a.merge(b)),
                None => next.push(a),
            }
        }
        parts = next;
    }
    parts.pop()
}

/// Maps fixed-size blocks of `0..n` in parallel and tree-reduces the results.
///
/// The block partition is independent of the thread count, so the result is
/// bitwise reproducible.
pub fn par_blocks<T, F>(n: usize, block: usize, f: F) -> Option<T>
where
    T: Merge + Send,
    F: Fn(std::ops::Range<usize>) -> T + Sync,
{
    let block = block.max(1);
    let parts: Vec<T> = (0..n.div_ceil(block))
        .into_par_iter()
        .map(|b| f(b * block..((b + 1) * block).min(n)))
        .collect();
    tree_reduce(parts)
}
