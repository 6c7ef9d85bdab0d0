//! Execution policy for the data-parallel inner loops.
//!
//! Every parallel entry point splits work into the same fixed chunks whether
//! it runs on the rayon pool or sequentially, and reduces chunk results in
//! index order, so the two policies produce bit-identical floating point.

/// How batch kernels and scenario sweeps are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise falls back
    /// to [`Exec::Sequential`].
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    /// Whether this policy will actually fan out across threads.
    pub fn is_parallel(self) -> bool {
        matches!(self, Exec::Parallel) && cfg!(feature = "parallel")
    }

    /// Evaluates `f(0..n)` and returns the results in index order.
    pub fn map_indexed<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Maps over a slice, preserving order.
    pub fn map_slice<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        self.map_indexed(items.len(), |i| f(&items[i]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policies_agree_on_order() {
        let seq = Exec::Sequential.map_indexed(100, |i| i * i);
        let par = Exec::Parallel.map_indexed(100, |i| i * i);
        assert_eq!(seq, par);
    }
}
