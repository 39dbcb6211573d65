//! Chunked data-parallel maps with a sequential fallback.
//!
//! Results always come back in chunk order and callers reduce them in that
//! order, so a fixed chunk size gives bit-identical sums whether the chunks ran
//! on one thread or many.

/// Work items per chunk for batch evaluation.
pub const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    #[default]
    Parallel,
    /// Single-threaded; used for `--deterministic` runs and benchmarks.
    Sequential,
}

impl Exec {
    pub fn from_deterministic(deterministic: bool) -> Self {
        if deterministic {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }
}

pub fn map_chunks<T, R, F>(items: &[T], chunk: usize, exec: Exec, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel {
        use rayon::prelude::*;
        return items.par_chunks(chunk).map(&f).collect();
    }
    let _ = exec;
    items.chunks(chunk).map(f).collect()
}

pub fn map_range<R, F>(n: usize, exec: Exec, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(&f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}
