//! Pluggable execution of independent jobs.
//!
//! Algorithms that fan out over trees, subsets or bootstrap draws take an
//! [`Executor`]. Each job derives its randomness from its own index, so the
//! result does not depend on how jobs are scheduled.

use alloc::vec::Vec;

pub trait Executor: Sync {
    /// Evaluate `f(0..n)` and return the results in index order.
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Runs jobs one after another on the calling thread.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}
