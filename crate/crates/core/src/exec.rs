//! Data-parallel map with a sequential fallback.
//!
//! Results always come back in input order and every reduction downstream is
//! an ordered fold, so switching between the two paths never changes a bit of
//! output.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Uses the rayon pool when the `parallel` feature is enabled, otherwise
    /// behaves like `Sequential`.
    #[default]
    Parallel,
}

impl Exec {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => items.par_iter().map(f).collect(),
            _ => items.iter().map(f).collect(),
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Caps the global worker pool. Honours `VISTEX_THREADS` when `threads` is
/// `None`; a second call is a no-op.
pub fn configure_threads(threads: Option<usize>) {
    let threads = threads.or_else(|| {
        std::env::var("VISTEX_THREADS")
            .ok()
            .and_then(|v| v.trim().parse().ok())
    });
    #[cfg(feature = "parallel")]
    if let Some(n) = threads.filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
}
