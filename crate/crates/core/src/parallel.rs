//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (the default) batch maps and large kernels
//! run on the rayon pool; without it everything runs sequentially. Both
//! paths compute every output element with the same per-element loop, so
//! results are bit-identical regardless of schedule or thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving input order in the output.
pub fn map_batch<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(&f).collect()
    }
}

/// Run `f` over mutable row chunks (`chunk_len` elements each), passing the
/// chunk index.
pub fn for_each_chunk_mut<F>(data: &mut [f64], chunk_len: usize, min_parallel_chunks: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(chunk_len > 0);
    #[cfg(feature = "parallel")]
    {
        if data.len() / chunk_len >= min_parallel_chunks {
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, chunk)| f(i, chunk));
            return;
        }
    }
    let _ = min_parallel_chunks;
    for (i, chunk) in data.chunks_mut(chunk_len).enumerate() {
        f(i, chunk);
    }
}

/// Configure the global worker pool. A no-op without the `parallel` feature.
pub fn set_worker_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        // Ignore the error: the pool can only be configured once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = n;
    }
}
