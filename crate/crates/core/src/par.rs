//! Data-parallel map used for per-example work.
//!
//! With the `parallel` feature the closure runs on the rayon pool; without it
//! the same closure runs sequentially. Results always come back in input
//! order, so reductions over them are bit-identical either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to every `(index, item)` pair and collects results in order.
#[cfg(feature = "parallel")]
pub fn map_indexed<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> O + Sync + Send,
{
    items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> O + Sync + Send,
{
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// Sequential reference of [`map_indexed`], available in every build.
pub fn map_indexed_seq<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    F: Fn(usize, &I) -> O,
{
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// Whether per-example work is dispatched to a thread pool in this build.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
