//! Data-parallel execution helpers.
//!
//! Hot loops in this crate (per-view feature extraction, pair realization,
//! guidance scoring, representation extraction) fan out over independent
//! items. With the `parallel` feature enabled (the default) they run on the
//! rayon thread pool; without it they run as plain sequential loops. Results
//! are always collected in input order and any reduction over them happens
//! sequentially afterwards, so outputs are bit-identical across thread
//! counts and across the two modes.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force the sequential code path even when the `parallel` feature is
/// compiled in. Used by the benchmark suite to compare both paths within a
/// single build; not intended for production configuration.
pub fn force_sequential(on: bool) {
    FORCE_SEQUENTIAL.store(on, Ordering::SeqCst);
}

pub fn sequential_forced() -> bool {
    FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Map `f` over `items`, in parallel when available. Output order matches
/// input order.
#[cfg(feature = "parallel")]
pub fn par_map<T: Sync, U: Send, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U + Sync + Send,
{
    if sequential_forced() {
        items.iter().map(f).collect()
    } else {
        items.par_iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

/// Map `f` over an index range, in parallel when available.
#[cfg(feature = "parallel")]
pub fn par_map_range<U: Send, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U + Sync + Send,
{
    if sequential_forced() {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn par_map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_preserves_order() {
        let xs: Vec<usize> = (0..1000).collect();
        let ys = par_map(&xs, |x| x * 2);
        assert_eq!(ys, xs.iter().map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn forced_sequential_matches() {
        let xs: Vec<usize> = (0..257).collect();
        let a = par_map(&xs, |x| x + 1);
        force_sequential(true);
        let b = par_map(&xs, |x| x + 1);
        force_sequential(false);
        assert_eq!(a, b);
    }
}
