//! Data-parallel map helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) the fallible map fans out over the
//! current rayon thread pool; without it the same code path runs
//! sequentially. Results are collected in input order either way, so callers
//! that fold them in index order emit identical numbers at any worker count.

use crate::error::Result;

/// Map `f` over `items` with the index attached, collecting in input order.
#[cfg(feature = "parallel")]
pub fn try_map_indexed<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> Result<U> + Sync,
{
    use rayon::prelude::*;
    items
        .par_iter()
        .enumerate()
        .map(|(i, t)| f(i, t))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn try_map_indexed<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> Result<U> + Sync,
{
    try_map_indexed_seq(items, f)
}

/// Sequential variant, always available; the bench suite compares it
/// against the parallel path.
pub fn try_map_indexed_seq<T, U, F>(items: &[T], f: F) -> Result<Vec<U>>
where
    F: Fn(usize, &T) -> Result<U>,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}
