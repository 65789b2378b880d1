//! Execution policy for data-parallel loops.
//!
//! With the `parallel` feature the [`Exec::Parallel`] policy maps work onto
//! rayon; without it every policy runs sequentially. Callers always reduce
//! results in index order, so both policies produce bit-identical output.

/// Chunk size for batched work. Fixed so that results never depend on the
/// number of worker threads.
pub const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }

    /// Map `f` over `0..n`, returning results in index order.
    pub fn map<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Map over `[start, end)` chunks of `0..n` of size [`CHUNK`].
    pub fn map_chunks<T, F>(self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(std::ops::Range<usize>) -> T + Sync + Send,
    {
        let chunks = n.div_ceil(CHUNK);
        self.map(chunks, |c| f(c * CHUNK..((c + 1) * CHUNK).min(n)))
    }
}
