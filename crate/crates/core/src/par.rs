//! Order-preserving data-parallel helpers.
//!
//! Every helper returns results in input order. Reductions are never done in
//! parallel: callers collect per-item results and fold them sequentially, which
//! keeps floating-point sums identical between the rayon and sequential paths.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Execution strategy for data-parallel loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise sequential.
    #[default]
    Parallel,
}

impl Execution {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Maps `f` over `items` with their indices.
pub fn map_indexed<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let _ = exec;
    items.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// Maps `f` over `0..n`.
pub fn map_range<R, F>(exec: Execution, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Like [`map_indexed`] but stops at the first error (by index).
pub fn try_map_indexed<T, R, E, F>(exec: Execution, items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(usize, &T) -> Result<R, E> + Sync + Send,
{
    map_indexed(exec, items, f).into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let xs: Vec<u64> = (0..1000).collect();
        let par = map_indexed(Execution::Parallel, &xs, |i, x| (i as u64) * 3 + x);
        let seq = map_indexed(Execution::Sequential, &xs, |i, x| (i as u64) * 3 + x);
        assert_eq!(par, seq);
        assert_eq!(map_range(Execution::Parallel, 5, |i| i * i), vec![0, 1, 4, 9, 16]);
    }

    #[test]
    fn first_error_wins() {
        let xs = [1, 2, 3, 4];
        let r: Result<Vec<i32>, usize> =
            try_map_indexed(Execution::Parallel, &xs, |i, &x| if x >= 3 { Err(i) } else { Ok(x) });
        assert_eq!(r, Err(2));
    }
}
