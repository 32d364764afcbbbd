//! Chunked data parallelism over index ranges with scoped threads.

use std::ops::Range;

/// Splits `0..n` into at most `jobs` contiguous chunks, runs `f` on each
/// and concatenates the results in order. Output is identical for any
/// `jobs` as long as `f` treats each index independently.
pub fn map_ranges<T, F>(n: usize, jobs: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> Vec<T> + Sync,
{
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return f(0..n);
    }
    let chunk = n.div_ceil(jobs);
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..jobs)
            .map(|t| {
                let f = &f;
                let range = (t * chunk).min(n)..((t + 1) * chunk).min(n);
                scope.spawn(move || f(range))
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}
