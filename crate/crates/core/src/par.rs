//! Minimal data-parallel helpers.
//!
//! Every helper assigns each output slot to exactly one task and keeps
//! reductions serial within a task, so results do not depend on the thread
//! count. With the `parallel` feature disabled the same closures run on a
//! plain sequential iterator.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Collect `f(0..n)` into a vector.
#[cfg(feature = "parallel")]
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_collect<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).map(f).collect()
}

/// Run `f(i, &mut out[i])` for every element of `out`.
#[cfg(feature = "parallel")]
pub fn for_each_mut<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    out.par_iter_mut().enumerate().for_each(|(i, v)| f(i, v));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_mut<T, F>(out: &mut [T], f: F)
where
    T: Send,
    F: Fn(usize, &mut T) + Sync + Send,
{
    out.iter_mut().enumerate().for_each(|(i, v)| f(i, v));
}

/// Run `f(c, chunk)` on disjoint `chunk_len`-sized chunks of `out`.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    out.par_chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(c, chunk)| f(c, chunk));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    out.chunks_mut(chunk_len)
        .enumerate()
        .for_each(|(c, chunk)| f(c, chunk));
}
