//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) work is spread over the rayon pool;
//! without it every helper runs sequentially. Results are always returned in
//! index order, so callers that reduce them in order stay bit-reproducible
//! regardless of thread count.

/// Environment variable capping the number of worker threads used for data
/// generation and other batch work.
pub const THREADS_ENV: &str = "TERNQ_THREADS";

/// `(0..n).map(f)` evaluated in parallel when available.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_range_seq(n, f)
    }
}

/// Sequential reference for [`map_range`].
pub fn map_range_seq<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R,
{
    (0..n).map(f).collect()
}

/// Thread cap requested through [`THREADS_ENV`], if any.
pub fn thread_cap_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Run `f` with at most `cap` worker threads.
///
/// Falls back to the global pool if a dedicated pool cannot be built.
pub fn with_thread_cap<R, F>(cap: Option<usize>, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = cap {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(n).build() {
                return pool.install(f);
            }
        }
        f()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = cap;
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree_in_order() {
        let f = |i: usize| (i as f64).sqrt().sin();
        assert_eq!(map_range(257, f), map_range_seq(257, f));
    }

    #[test]
    fn capped_pool_runs() {
        let v = with_thread_cap(Some(1), || map_range(10, |i| i * 2));
        assert_eq!(v, (0..10).map(|i| i * 2).collect::<Vec<_>>());
    }
}
