//! Batch execution strategy.
//!
//! Every batch-shaped operation in the crate (screenshot analysis, pairwise
//! template similarity, cross-validation folds, shard-wise clustering, remote
//! lookups) goes through [`Execution`]. With the `parallel` feature the
//! [`Execution::Parallel`] variant fans work out over the ambient rayon pool;
//! without it both variants run on the calling thread. Results are always
//! returned in input order, so output never depends on scheduling.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether work is actually spread across threads in this build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }

    /// Map `f` over `items`, preserving order.
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    /// Map `f` over `0..n`, preserving order.
    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Fold contiguous chunks of `items` into partial states and merge them.
    ///
    /// `merge` must be associative and insensitive to argument order; the
    /// chunking differs between the two strategies.
    pub fn fold_reduce<T, S, Init, Fold, Merge>(
        self,
        items: &[T],
        init: Init,
        fold: Fold,
        merge: Merge,
    ) -> S
    where
        T: Sync,
        S: Send,
        Init: Fn() -> S + Sync + Send,
        Fold: Fn(S, usize, &T) -> S + Sync + Send,
        Merge: Fn(S, S) -> S + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self.is_parallel() {
            return items
                .par_iter()
                .enumerate()
                .fold(&init, |acc, (i, t)| fold(acc, i, t))
                .reduce(&init, &merge);
        }
        let _ = &merge;
        items
            .iter()
            .enumerate()
            .fold(init(), |acc, (i, t)| fold(acc, i, t))
    }
}
