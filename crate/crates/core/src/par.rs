//! Data-parallel helpers with a sequential fallback.
//!
//! Every reduction here splits work into fixed-size chunks and combines the
//! per-chunk results in chunk order, so the parallel and sequential paths
//! produce bitwise-identical floats regardless of thread count. With the
//! `parallel` feature disabled, [`Exec::Parallel`] silently runs sequentially.

/// Examples per reduction chunk for batch forward/backward and evaluation.
pub const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    /// `true` when this build can actually run work on the rayon pool.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Maps `f` over consecutive `chunk`-sized slices of `items`, preserving order.
pub fn map_chunks<T, R, F>(exec: Exec, items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_chunks(chunk).map(f).collect();
    }
    let _ = exec;
    items.chunks(chunk).map(f).collect()
}

/// Maps `f` over each item, preserving order.
pub fn map<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}
