//! Order-preserving map that runs on the rayon pool when the `parallel`
//! feature is enabled and the caller asks for it, sequentially otherwise.
//! Output order always matches input order.

#[cfg(feature = "parallel")]
pub fn map<T, U, F>(parallel: bool, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    if parallel && items.len() > 1 {
        items.par_iter().map(f).collect()
    } else {
        items.iter().map(f).collect()
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map<T, U, F>(_parallel: bool, items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Whether [`map`] can actually run in parallel in this build.
pub const fn available() -> bool {
    cfg!(feature = "parallel")
}
