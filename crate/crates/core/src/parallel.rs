//! Order-preserving map that runs on the rayon pool when the `parallel`
//! feature is enabled and the caller asks for it, and sequentially otherwise.

pub fn map<T, U, F>(items: &[T], parallel: bool, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if parallel && items.len() > 1 {
            return items.par_iter().map(f).collect();
        }
    }
    let _ = parallel;
    items.iter().map(f).collect()
}

/// Whether `map` can actually use more than one thread.
pub fn available() -> bool {
    cfg!(feature = "parallel")
}
