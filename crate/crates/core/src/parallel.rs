//! Deterministic fan-out over replica indices.
//!
//! The worker count is a throughput knob only: work is split into contiguous
//! index chunks, each chunk is computed on its own thread, and the chunk
//! results are concatenated in index order. Per-replica values depend only on
//! the replica index (every replica derives its own noise stream), so the
//! output is byte-identical for any thread count.

/// Applies `f` to `0..n` and returns the results in index order, using up to
/// `threads` worker threads.
pub fn map_indexed<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let threads = threads.max(1).min(n.max(1));
    if threads == 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    let mut out: Vec<Vec<T>> = Vec::with_capacity(threads);
    std::thread::scope(|scope| {
        let mut handles = Vec::with_capacity(threads);
        for w in 0..threads {
            let lo = w * chunk;
            let hi = ((w + 1) * chunk).min(n);
            if lo >= hi {
                break;
            }
            let f = &f;
            handles.push(scope.spawn(move || (lo..hi).map(f).collect::<Vec<T>>()));
        }
        for h in handles {
            out.push(h.join().expect("worker thread panicked"));
        }
    });
    out.into_iter().flatten().collect()
}
