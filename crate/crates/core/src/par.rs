//! Order-preserving map helpers.
//!
//! With the `parallel` feature these run on the current rayon pool; without
//! it they are plain sequential iterators. Results are always collected in
//! input order and every reduction downstream is done sequentially over the
//! collected vector, so outputs are bitwise independent of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::Result;

/// Whether this build can run work on more than one thread.
pub const PARALLEL: bool = cfg!(feature = "parallel");

pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
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
        items.iter().map(f).collect()
    }
}

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

/// Fallible [`map`]; the first error in input order is returned.
pub fn try_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    map(items, f).into_iter().collect()
}

pub fn try_map_indexed<R, F>(n: usize, f: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> Result<R> + Sync + Send,
{
    map_indexed(n, f).into_iter().collect()
}

/// Runs `f` on a dedicated pool of `threads` workers (or inline when the
/// `parallel` feature is off).
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        match rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
        {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}
