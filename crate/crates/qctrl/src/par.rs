//! Data-parallel map over independent work items. With the `parallel`
//! feature (default) the work is spread over a rayon pool; without it the
//! same loop runs sequentially. Results are returned in index order either
//! way, so callers stay deterministic as long as each item seeds its own RNG.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Evaluate `f(0..n)` and collect results in index order.
#[cfg(feature = "parallel")]
pub fn run_indexed<U: Send>(n: usize, f: impl Fn(usize) -> U + Sync + Send) -> Vec<U> {
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn run_indexed<U: Send>(n: usize, f: impl Fn(usize) -> U + Sync + Send) -> Vec<U> {
    run_indexed_serial(n, f)
}

/// Sequential fallback, always available (used by benches for comparison).
pub fn run_indexed_serial<U>(n: usize, f: impl Fn(usize) -> U) -> Vec<U> {
    (0..n).map(f).collect()
}
