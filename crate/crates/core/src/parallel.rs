//! Data-parallel helpers over independent work items.
//!
//! With the `parallel` feature (default) work is distributed with rayon;
//! without it, or when [`Parallelism::Sequential`] is requested, items are
//! processed in order on the calling thread. Results are always returned in
//! input order, so reductions over them are deterministic either way.

/// Execution strategy for per-example work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    #[default]
    Auto,
}

impl Parallelism {
    /// True when this build can fan work out to a thread pool.
    pub fn available() -> bool {
        cfg!(feature = "parallel")
    }
}

/// Ordered map over `items`.
pub fn map_ordered<I, O, F>(items: &[I], mode: Parallelism, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> O + Sync + Send,
{
    match mode {
        Parallelism::Sequential => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
        Parallelism::Auto => par_map(items, f),
    }
}

#[cfg(feature = "parallel")]
fn par_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> O + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> O + Sync + Send,
{
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let xs: Vec<u64> = (0..1000).collect();
        let a = map_ordered(&xs, Parallelism::Auto, |i, &x| x * 3 + i as u64);
        let b = map_ordered(&xs, Parallelism::Sequential, |i, &x| x * 3 + i as u64);
        assert_eq!(a, b);
    }
}
