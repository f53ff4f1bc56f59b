//! Order-preserving data-parallel map with a sequential fallback.
//!
//! Work items (instance encoding, cross-validation folds, retrain sweeps) are
//! independent, so parallel and sequential execution produce identical output
//! vectors. Parallelism is compiled in via the `parallel` feature and can be
//! disabled at runtime with [`set_sequential`] for single-threaded runs.

use std::sync::atomic::{AtomicBool, Ordering};

static FORCE_SEQUENTIAL: AtomicBool = AtomicBool::new(false);

/// Force sequential execution even when the `parallel` feature is enabled.
pub fn set_sequential(force: bool) {
    FORCE_SEQUENTIAL.store(force, Ordering::SeqCst);
}

/// True when maps run on the calling thread only.
pub fn is_sequential() -> bool {
    if cfg!(not(feature = "parallel")) {
        return true;
    }
    FORCE_SEQUENTIAL.load(Ordering::SeqCst)
}

/// Configure the worker pool: 0 uses every core, 1 forces sequential
/// execution, anything else sizes the global pool (first caller wins).
pub fn configure_threads(n: usize) {
    match n {
        0 => {}
        1 => set_sequential(true),
        _n => {
            #[cfg(feature = "parallel")]
            {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(_n).build_global();
            }
        }
    }
}

/// Map over `0..n`, preserving index order in the output.
pub fn par_map_indexed<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if !is_sequential() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Map over a slice, preserving element order in the output.
pub fn par_map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if !is_sequential() {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
    }
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let par = par_map_indexed(100, |i| i * i);
        set_sequential(true);
        let seq = par_map_indexed(100, |i| i * i);
        set_sequential(false);
        assert_eq!(par, seq);
    }
}
