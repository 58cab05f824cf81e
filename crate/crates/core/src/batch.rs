//! Batch execution over independent work items.
//!
//! Sweeps, multi-scene experiments, and calibration hypothesis scoring
//! are all maps over an index range with no cross-item state. With the
//! `parallel` feature (default) `batch_map` fans out on the rayon pool;
//! without it the same call runs sequentially. Results come back in
//! index order either way, so outputs are identical across both builds.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `0..n`, in parallel when the `parallel` feature is on.
pub fn batch_map<T, F>(n: usize, f: F) -> Vec<T>
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
        (0..n).map(f).collect()
    }
}

/// Sequential reference path, available regardless of features. The
/// benchmark suite compares this against `batch_map`.
pub fn batch_map_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Caps rayon's worker count for this process. A `jobs` of 0 or 1 gives
/// sequential behavior on the pool. Returns false if the global pool was
/// already initialized (later calls cannot resize it).
#[cfg(feature = "parallel")]
pub fn configure_jobs(jobs: usize) -> bool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build_global()
        .is_ok()
}

#[cfg(not(feature = "parallel"))]
pub fn configure_jobs(_jobs: usize) -> bool {
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_in_order() {
        let f = |i: usize| (i * i) as u64 ^ 0x5bd1e995;
        assert_eq!(batch_map(1000, f), batch_map_seq(1000, f));
    }

    #[test]
    fn empty_batch() {
        let out: Vec<u8> = batch_map(0, |_| 0u8);
        assert!(out.is_empty());
    }
}
