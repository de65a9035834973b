//! Order-preserving per-item map, parallel when the `parallel` feature is on.
//!
//! Results always come back in index order, so any reduction the caller runs
//! over them is deterministic regardless of thread count.

#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Like [`map_indexed`] but consumes `items`, passing each with its index.
#[cfg(feature = "parallel")]
pub fn map_vec<I, T, F>(items: Vec<I>, f: F) -> Vec<T>
where
    I: Send,
    T: Send,
    F: Fn(usize, I) -> T + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_vec<I, T, F>(items: Vec<I>, f: F) -> Vec<T>
where
    F: Fn(usize, I) -> T,
{
    items.into_iter().enumerate().map(|(i, x)| f(i, x)).collect()
}
