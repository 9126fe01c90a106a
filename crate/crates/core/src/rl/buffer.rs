use rand::Rng;

use crate::cli::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::exec::{RngKey, SampleBatch};
use crate::net::Matrix;

/// FIFO ring of transitions. Storage grows lazily up to `capacity`.
///
/// Only `terminated` is kept: truncated transitions are stored as live so that
/// targets bootstrap through time limits.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    pub capacity: usize,
    obs_dim: usize,
    action_dim: usize,
    obs: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    terminated: Vec<bool>,
    next_obs: Vec<f64>,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, obs_dim: usize, action_dim: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("replay buffer capacity must be positive"));
        }
        Ok(ReplayBuffer {
            capacity,
            obs_dim,
            action_dim,
            obs: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            terminated: Vec::new(),
            next_obs: Vec::new(),
            cursor: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn add(&mut self, batch: &SampleBatch) -> Result<()> {
        if batch.obs.cols() != self.obs_dim || batch.actions.cols() != self.action_dim {
            return Err(Error::shape("batch widths do not match the replay buffer"));
        }
        let (od, ad) = (self.obs_dim, self.action_dim);
        for i in 0..batch.len() {
            if self.len() < self.capacity {
                self.obs.extend_from_slice(batch.obs.row(i));
                self.actions.extend_from_slice(batch.actions.row(i));
                self.rewards.push(batch.rewards[i]);
                self.terminated.push(batch.terminated[i]);
                self.next_obs.extend_from_slice(batch.next_obs.row(i));
            } else {
                let c = self.cursor;
                self.obs[c * od..(c + 1) * od].copy_from_slice(batch.obs.row(i));
                self.actions[c * ad..(c + 1) * ad].copy_from_slice(batch.actions.row(i));
                self.rewards[c] = batch.rewards[i];
                self.terminated[c] = batch.terminated[i];
                self.next_obs[c * od..(c + 1) * od].copy_from_slice(batch.next_obs.row(i));
            }
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        Ok(())
    }

    /// `n` uniform draws with replacement.
    pub fn sample(&self, key: RngKey, n: usize) -> Result<SampleBatch> {
        let size = self.len();
        if size == 0 {
            return Err(Error::InsufficientData { size, needed: 1 });
        }
        let mut rng = key.rng();
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..size)).collect();
        Ok(self.gather(&idx))
    }

    pub fn gather(&self, idx: &[usize]) -> SampleBatch {
        let (od, ad) = (self.obs_dim, self.action_dim);
        let rows = |src: &[f64], w: usize| {
            let mut v = Vec::with_capacity(idx.len() * w);
            for &i in idx {
                v.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
            Matrix::from_vec(idx.len(), w, v).expect("consistent widths")
        };
        SampleBatch {
            obs: rows(&self.obs, od),
            actions: rows(&self.actions, ad),
            rewards: idx.iter().map(|&i| self.rewards[i]).collect(),
            terminated: idx.iter().map(|&i| self.terminated[i]).collect(),
            truncated: vec![false; idx.len()],
            next_obs: rows(&self.next_obs, od),
            log_probs: None,
            values: None,
        }
    }

    pub fn save(&self, ck: &mut Checkpoint, p: &str) {
        ck.put_u64s(&format!("{p}cursor"), &[self.cursor as u64]);
        ck.put_f64s(&format!("{p}obs"), &self.obs);
        ck.put_f64s(&format!("{p}actions"), &self.actions);
        ck.put_f64s(&format!("{p}rewards"), &self.rewards);
        ck.put_bools(&format!("{p}terminated"), &self.terminated);
        ck.put_f64s(&format!("{p}next_obs"), &self.next_obs);
    }

    pub fn load(&mut self, ck: &Checkpoint, p: &str) -> Result<()> {
        let rewards = ck.f64s(&format!("{p}rewards"))?.to_vec();
        let n = rewards.len();
        if n > self.capacity {
            return Err(Error::Checkpoint("replay buffer larger than its capacity".into()));
        }
        let obs = ck.f64s_len(&format!("{p}obs"), n * self.obs_dim)?;
        let actions = ck.f64s_len(&format!("{p}actions"), n * self.action_dim)?;
        let next_obs = ck.f64s_len(&format!("{p}next_obs"), n * self.obs_dim)?;
        let terminated = ck.bools(&format!("{p}terminated"))?;
        let cursor = ck.u64(&format!("{p}cursor"))? as usize;
        if terminated.len() != n || cursor >= self.capacity {
            return Err(Error::Checkpoint("inconsistent replay buffer".into()));
        }
        *self = ReplayBuffer {
            obs,
            actions,
            rewards,
            terminated,
            next_obs,
            cursor,
            ..self.clone_empty()
        };
        Ok(())
    }

    fn clone_empty(&self) -> Self {
        ReplayBuffer::new(self.capacity, self.obs_dim, self.action_dim).expect("valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rows(vals: &[f64]) -> SampleBatch {
        let n = vals.len();
        SampleBatch {
            obs: Matrix::from_vec(n, 1, vals.to_vec()).unwrap(),
            actions: Matrix::from_vec(n, 1, vals.to_vec()).unwrap(),
            rewards: vals.to_vec(),
            terminated: vec![false; n],
            truncated: vec![false; n],
            next_obs: Matrix::from_vec(n, 1, vals.iter().map(|v| v + 0.5).collect()).unwrap(),
            log_probs: None,
            values: None,
        }
    }

    #[test]
    fn ring_overwrite() {
        let mut b = ReplayBuffer::new(4, 1, 1).unwrap();
        b.add(&rows(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0])).unwrap();
        let mut held = b.gather(&[0, 1, 2, 3]).rewards;
        held.sort_by(f64::total_cmp);
        assert_eq!(held, vec![2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn single_row_sampling() {
        let mut b = ReplayBuffer::new(10, 1, 1).unwrap();
        assert!(matches!(b.sample(RngKey::from_seed(0), 3), Err(Error::InsufficientData { .. })));
        b.add(&rows(&[7.0])).unwrap();
        assert_eq!(b.sample(RngKey::from_seed(0), 5).unwrap().rewards, vec![7.0; 5]);
    }

    #[test]
    fn uniform_frequencies() {
        let mut b = ReplayBuffer::new(10, 1, 1).unwrap();
        b.add(&rows(&(0..10).map(|i| i as f64).collect::<Vec<_>>())).unwrap();
        let s = b.sample(RngKey::from_seed(42), 100_000).unwrap();
        let mut counts = [0f64; 10];
        for r in &s.rewards {
            counts[*r as usize] += 1.0;
        }
        let (n, p) = (100_000f64, 0.1);
        let sd = (n * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c - n * p).abs() < 5.0 * sd, "{c}");
        }
    }

    proptest! {
        #[test]
        fn matches_brute_force_ring(cap in 1usize..8, chunks in proptest::collection::vec(1usize..6, 1..8)) {
            let mut b = ReplayBuffer::new(cap, 1, 1).unwrap();
            let mut sim: Vec<f64> = Vec::new();
            let mut cursor = 0;
            let mut next = 0.0;
            for c in chunks {
                let vals: Vec<f64> = (0..c).map(|_| { next += 1.0; next }).collect();
                b.add(&rows(&vals)).unwrap();
                for v in vals {
                    if sim.len() < cap { sim.push(v) } else { sim[cursor] = v }
                    cursor = (cursor + 1) % cap;
                }
            }
            let idx: Vec<usize> = (0..sim.len()).collect();
            prop_assert_eq!(b.gather(&idx).rewards, sim);
        }
    }
}
