//! Indexed batch mapping with optional data parallelism.
//!
//! Independent per-index computations (hyperparameter grid evaluations,
//! finite-difference probes, prediction cells, replicate studies) go through
//! `map_indexed`, which fans out across threads when the `parallel` feature
//! is enabled and otherwise runs sequentially. Results are collected in
//! index order either way, so outputs are identical across modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to `0..n` and collects results in index order, in parallel
/// when the `parallel` feature is active.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_indexed_seq(n, f)
    }
}

/// Sequential twin of [`map_indexed`]; always single-threaded. Kept public
/// so benchmarks can compare both execution paths directly.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}
