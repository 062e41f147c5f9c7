//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature enabled and `parallel == true`, work is spread
//! over the current rayon pool. Every helper produces results in index order,
//! so outputs are bit-identical to the sequential path.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map every element to a result, preserving order.
pub fn map<T, R, F>(parallel: bool, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        return items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let _ = parallel;
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Mutate every element in place and collect a per-element result.
pub fn map_mut<T, R, F>(parallel: bool, items: &mut [T], f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, &mut T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if parallel {
        return items
            .par_iter_mut()
            .enumerate()
            .map(|(i, t)| f(i, t))
            .collect();
    }
    let _ = parallel;
    items.iter_mut().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Whether this build can run anything in parallel.
pub const fn parallel_available() -> bool {
    cfg!(feature = "parallel")
}
