//! Hierarchical parallel execution: splittable keys, a deterministic parallel
//! map, and batched rollouts over an (agent x environment) lane grid.
//!
//! This is the only module that spawns workers. Every map collects results in
//! input order and every lane derives its randomness from its grid coordinates,
//! so outputs do not depend on the worker count or the schedule.

mod key;
mod rollout;

pub use key::{KeyRng, RngKey};
pub use rollout::{
    batched_rollout, rollout_lanes, Lanes, Policy, PolicyOutput, RolloutMode, RolloutOptions,
    RolloutResult, SampleBatch,
};

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Worker pool front-end. `workers == 1` runs everything inline.
#[derive(Clone)]
pub struct Executor {
    workers: usize,
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor").field("workers", &self.workers).finish()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Executor::sequential()
    }
}

impl Executor {
    /// `workers == 0` selects the number of available cores.
    pub fn new(workers: usize) -> Result<Self> {
        let workers = if workers == 0 {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        } else {
            workers
        };
        if workers == 1 {
            return Ok(Executor::sequential());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .thread_name(|i| format!("erlkit-worker-{i}"))
            .build()
            .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
        Ok(Executor {
            workers,
            pool: Some(Arc::new(pool)),
        })
    }

    pub fn sequential() -> Self {
        Executor {
            workers: 1,
            pool: None,
        }
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Applies `f(item, fold_in(key, index))` to every item; output order matches input order.
    pub fn parallel_map<T, R, F>(&self, items: &[T], key: RngKey, f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T, RngKey) -> R + Sync + Send,
    {
        self.map_indexed(items.len(), |i| f(&items[i], key.fold_in(i as u64)))
    }

    pub fn map_indexed<R, F>(&self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        match &self.pool {
            None => (0..n).map(f).collect(),
            Some(pool) => pool.install(|| (0..n).into_par_iter().map(f).collect()),
        }
    }

    pub fn for_each_mut<T, F>(&self, items: &mut [T], f: F)
    where
        T: Send,
        F: Fn(usize, &mut T) + Sync + Send,
    {
        match &self.pool {
            None => items.iter_mut().enumerate().for_each(|(i, x)| f(i, x)),
            Some(pool) => pool.install(|| {
                items
                    .par_iter_mut()
                    .enumerate()
                    .for_each(|(i, x)| f(i, x))
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_map() {
        let ex = Executor::new(4).unwrap();
        let out: Vec<u64> = ex.parallel_map(&[] as &[u64], RngKey::from_seed(0), |x, _| *x);
        assert!(out.is_empty());
    }

    #[test]
    fn identity_map() {
        let ex = Executor::new(3).unwrap();
        let items: Vec<u64> = (0..100).collect();
        let out = ex.parallel_map(&items, RngKey::from_seed(0), |x, _| *x);
        assert_eq!(out, items);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let items: Vec<u64> = (0..257).collect();
        let key = RngKey::from_seed(5);
        let f = |x: &u64, k: RngKey| {
            use rand::Rng;
            let mut r = k.rng();
            (0..*x % 17).map(|_| r.random::<f64>()).sum::<f64>().to_bits()
        };
        let one = Executor::new(1).unwrap().parallel_map(&items, key, f);
        let eight = Executor::new(8).unwrap().parallel_map(&items, key, f);
        assert_eq!(one, eight);
    }

    #[test]
    fn zero_workers_means_auto() {
        let ex = Executor::new(0).unwrap();
        assert!(ex.workers() >= 1);
    }
}
