//! Order-preserving map over independent work items: a rayon pool when the
//! `parallel` feature is on, a plain loop otherwise.

/// Applies `f` to every item and returns the results in input order.
/// `jobs = Some(1)` always runs sequentially; `None` uses every core.
#[cfg(feature = "parallel")]
pub fn map_ordered<T, R, F>(items: Vec<T>, jobs: Option<usize>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    match jobs {
        Some(1) => items.into_iter().map(f).collect(),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| items.into_par_iter().map(&f).collect()),
            Err(_) => items.into_iter().map(f).collect(),
        },
        None => items.into_par_iter().map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, R, F>(items: Vec<T>, _jobs: Option<usize>, f: F) -> Vec<R>
where
    F: Fn(T) -> R,
{
    items.into_iter().map(f).collect()
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
