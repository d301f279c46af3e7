//! Small numerical kernels shared across the crate.

use rayon::prelude::*;

/// Chunk size for deterministic parallel reductions. Fixed so the reduction
/// tree, and therefore the rounding, does not depend on the thread count.
pub(crate) const REDUCE_CHUNK: usize = 1024;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log(sum(exp(xs)))` with max-subtraction. Returns `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// `log(1 + sum(exp(xs)))`, i.e. a log-sum-exp with an implicit zero logit.
pub fn log1p_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(0.0_f64, f64::max);
    let tail: f64 = xs.iter().map(|&x| (x - max).exp()).sum();
    max + ((-max).exp() + tail).ln()
}

/// Log-probabilities of a softmax whose last logit is the implicit zero
/// reference. `out` has length `scores.len() + 1`.
pub fn log_softmax_with_reference(scores: &[f64], out: &mut [f64]) {
    debug_assert_eq!(out.len(), scores.len() + 1);
    let lse = log1p_sum_exp(scores);
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = s - lse;
    }
    out[scores.len()] = -lse;
}

/// Like [`log_softmax_with_reference`], with the free scores in
/// `buf[..len-1]`; the last slot is overwritten with the reference entry.
pub fn log_softmax_in_place(buf: &mut [f64]) {
    let last = buf.len() - 1;
    let lse = log1p_sum_exp(&buf[..last]);
    for v in &mut buf[..last] {
        *v -= lse;
    }
    buf[last] = -lse;
}

/// Softmax weights over the free logits only (reference excluded); these are
/// the gradient weights of `log1p_sum_exp`.
pub fn softmax_free(scores: &[f64], out: &mut [f64]) {
    let lse = log1p_sum_exp(scores);
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (s - lse).exp();
    }
}

/// Deterministic parallel sum of `f(i)` over `0..n`.
pub(crate) fn chunked_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let starts: Vec<usize> = (0..n).step_by(REDUCE_CHUNK).collect();
    let partials: Vec<f64> = starts
        .par_iter()
        .map(|&s| (s..(s + REDUCE_CHUNK).min(n)).map(&f).sum())
        .collect();
    partials.into_iter().sum()
}

/// Deterministic parallel map-reduce over fixed chunks of `0..n`. `fold`
/// accumulates one index into a chunk-local accumulator; `merge` adds the
/// chunk accumulators together in chunk order.
pub(crate) fn chunked_reduce<A, I, F, M>(n: usize, init: I, fold: F, merge: M) -> A
where
    A: Send,
    I: Fn() -> A + Sync,
    F: Fn(&mut A, usize) + Sync,
    M: Fn(&mut A, A),
{
    let starts: Vec<usize> = (0..n).step_by(REDUCE_CHUNK).collect();
    let partials: Vec<A> = starts
        .par_iter()
        .map(|&s| {
            let mut acc = init();
            for i in s..(s + REDUCE_CHUNK).min(n) {
                fold(&mut acc, i);
            }
            acc
        })
        .collect();
    let mut total = init();
    for p in partials {
        merge(&mut total, p);
    }
    total
}
