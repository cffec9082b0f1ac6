//! Deterministic work scheduling.
//!
//! Every data-parallel loop in the crate routes through these helpers. Work
//! is split into fixed chunks whose boundaries depend only on the problem
//! size, never on the number of worker threads, and no two tasks write the
//! same output element. The rayon path (feature `parallel`, on by default)
//! and the sequential fallback therefore produce bitwise-identical results;
//! `cargo bench` vs `cargo bench --no-default-features` compares the two.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Apply `f` to fixed-size chunks of `data`, passing the chunk index.
pub fn for_chunks_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (i, c) in data.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    }
}

/// Run `n` independent tasks producing one `R` each, in task order.
pub fn map_indexed<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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
