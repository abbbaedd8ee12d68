//! Path-indexed parallel maps and order-stable reductions.
//!
//! Every per-path result lands at its own index, and sums run sequentially
//! over that ordered vector, so results never depend on how work was split
//! between threads.

/// Maps `f` over `0..count` with a per-worker scratch value built by `init`.
///
/// With the `parallel` feature this runs on the current rayon pool,
/// otherwise it falls back to [`map_indexed_seq`].
#[cfg(feature = "parallel")]
pub fn map_indexed<T, S, I, F>(count: usize, init: I, f: F) -> Vec<T>
where
    T: Send,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..count).into_par_iter().map_init(init, f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, S, I, F>(count: usize, init: I, f: F) -> Vec<T>
where
    T: Send,
    I: Fn() -> S + Sync + Send,
    F: Fn(&mut S, usize) -> T + Sync + Send,
{
    map_indexed_seq(count, init, f)
}

/// Sequential version of [`map_indexed`]; always available.
pub fn map_indexed_seq<T, S, I, F>(count: usize, init: I, f: F) -> Vec<T>
where
    I: Fn() -> S,
    F: Fn(&mut S, usize) -> T,
{
    let mut scratch = init();
    (0..count).map(|i| f(&mut scratch, i)).collect()
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut carry = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    compensated_sum(values.iter().copied()) / values.len() as f64
}

/// Sample standard deviation (denominator `len - 1`); zero for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss = compensated_sum(values.iter().map(|v| (v - m) * (v - m)));
    (ss / (n - 1) as f64).sqrt()
}
