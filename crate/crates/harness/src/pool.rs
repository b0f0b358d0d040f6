//! Worker parallelism for independent jobs (runs, splits).

use rayon::prelude::*;

pub const THREADS_ENV: &str = "SALGUIDE_THREADS";

/// `SALGUIDE_THREADS` if set to a positive integer, else the core count.
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Maps `f` over `items` on at most [`worker_count`] threads, keeping order.
pub fn map_jobs<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    let n = worker_count().min(items.len().max(1));
    if n <= 1 {
        return items.into_iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .expect("thread pool");
    pool.install(|| items.into_par_iter().map(f).collect())
}
