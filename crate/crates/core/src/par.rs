//! Thin switch between rayon and plain iterators.
//!
//! Every heavy scan in this crate maps an index range to a vector of
//! results and then reduces sequentially, so output ordering (and hence
//! every byte of every report) is independent of the thread count. The
//! `_seq` entry points stay compiled under all feature sets; the
//! `parallel` feature only changes what the un-suffixed wrappers do.

/// Sequential map over an index range, kept for benches and the
/// no-`parallel` build.
pub fn map_range_seq<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R + Sync + Send,
    R: Send,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R + Sync + Send,
    R: Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    F: Fn(usize) -> R + Sync + Send,
    R: Send,
{
    map_range_seq(n, f)
}
