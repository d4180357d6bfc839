//! Index-parallel map used by every batch operation. Each index computes its
//! own output slot, so results are identical regardless of thread count; with
//! the `parallel` feature disabled the loop runs sequentially with no rayon
//! dependency at all.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

pub fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
