//! Data-parallel helpers. With the `parallel` feature (default) these use
//! rayon; without it they fall back to sequential iteration. Results are
//! always returned in input order so reductions stay deterministic.

pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        parallel::map(items, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        sequential::map(items, f)
    }
}

pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        parallel::map_range(n, f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        sequential::map_range(n, f)
    }
}

pub mod sequential {
    pub fn map<T, R, F: Fn(&T) -> R>(items: &[T], f: F) -> Vec<R> {
        items.iter().map(f).collect()
    }

    pub fn map_range<R, F: Fn(usize) -> R>(n: usize, f: F) -> Vec<R> {
        (0..n).map(f).collect()
    }
}

#[cfg(feature = "parallel")]
pub mod parallel {
    use rayon::prelude::*;

    pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        items.par_iter().map(f).collect()
    }

    pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..n).into_par_iter().map(f).collect()
    }
}
