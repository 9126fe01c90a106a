use std::sync::Arc;

use rand::Rng;

use super::{centered_ranks, check_fitness, sample_isotropic, standard_normal, Candidates, TellReport};
use crate::cli::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::exec::RngKey;
use crate::net::ParamVector;
use crate::rl::{adam_step, AdamConfig, AdamState};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OpenEsConfig {
    pub pop_size: usize,
    pub sigma: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub mirrored: bool,
    /// Size of a pre-built shared noise table; `None` generates noise on the fly.
    pub noise_table: Option<usize>,
}

impl Default for OpenEsConfig {
    fn default() -> Self {
        OpenEsConfig {
            pop_size: 128,
            sigma: 0.02,
            lr: 0.01,
            weight_decay: 0.005,
            mirrored: true,
            noise_table: None,
        }
    }
}

/// A block of standard-normal noise; directions are windows at random offsets.
#[derive(Clone, Debug)]
pub struct NoiseTable {
    pub seed: u64,
    data: Arc<Vec<f64>>,
}

impl PartialEq for NoiseTable {
    fn eq(&self, other: &Self) -> bool {
        self.seed == other.seed && self.data.len() == other.data.len()
    }
}

impl NoiseTable {
    pub fn new(size: usize, seed: u64) -> Self {
        NoiseTable {
            seed,
            data: Arc::new(standard_normal(RngKey::from_seed(seed), size)),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sample(&self, key: RngKey, d: usize) -> Result<Vec<f64>> {
        if d > self.data.len() {
            return Err(Error::invalid(format!(
                "noise table of {} values cannot supply {d}-dimensional noise",
                self.data.len()
            )));
        }
        let off = key.rng().random_range(0..=self.data.len() - d);
        Ok(self.data[off..off + d].to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpenEsState {
    pub mean: ParamVector,
    pub sigma: f64,
    pub adam: AdamState,
    pub cfg: OpenEsConfig,
    pub table: Option<NoiseTable>,
}

impl OpenEsState {
    /// `table_seed` seeds the noise table when one is configured.
    pub fn new(mean: ParamVector, cfg: OpenEsConfig, table_seed: u64) -> Result<Self> {
        if !(cfg.sigma >= 0.0) {
            return Err(Error::invalid("OpenES sigma must be non-negative"));
        }
        let d = mean.len();
        let table = cfg.noise_table.map(|n| NoiseTable::new(n, table_seed));
        Ok(OpenEsState {
            adam: AdamState::new(d),
            mean,
            sigma: cfg.sigma,
            cfg,
            table,
        })
    }

    pub fn ask(&self, key: RngKey, n: usize) -> Result<Candidates> {
        sample_isotropic(&self.mean, self.sigma, n, self.cfg.mirrored, key, self.table.as_ref())
    }

    /// Rank-shaped gradient ascent with Adam and decoupled weight decay.
    pub fn tell(&mut self, cands: &Candidates, fitness: &[f64]) -> Result<TellReport> {
        check_fitness(fitness, cands.len())?;
        let g = self.gradient(cands, fitness);
        // descend the negated ascent direction
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        let decay = 1.0 - self.cfg.lr * self.cfg.weight_decay;
        for m in self.mean.iter_mut() {
            *m *= decay;
        }
        adam_step(&mut self.mean, &neg, &mut self.adam, &AdamConfig::with_lr(self.cfg.lr));
        Ok(TellReport {
            degenerate: g.iter().all(|v| *v == 0.0),
            ..Default::default()
        })
    }

    /// `(1 / (n sigma)) * sum_i shaped_i * eps_i`.
    pub fn gradient(&self, cands: &Candidates, fitness: &[f64]) -> Vec<f64> {
        let n = cands.len();
        let shaped = centered_ranks(fitness);
        let d = self.mean.len();
        let mut g = vec![0.0; d];
        let mut weights = Vec::new();
        if cands.mirrored {
            for j in 0..n / 2 {
                weights.push(shaped[2 * j] - shaped[2 * j + 1]);
            }
        } else {
            weights = shaped;
        }
        for (w, dir) in weights.iter().zip(&cands.directions) {
            if *w == 0.0 {
                continue;
            }
            for (gk, e) in g.iter_mut().zip(dir) {
                *gk += w * e;
            }
        }
        let scale = if self.sigma > 0.0 { 1.0 / (n as f64 * self.sigma) } else { 0.0 };
        for v in g.iter_mut() {
            *v *= scale;
        }
        g
    }

    pub fn save(&self, ck: &mut Checkpoint, p: &str) {
        ck.put_f64s(&format!("{p}mean"), &self.mean);
        ck.put_f64(&format!("{p}sigma"), self.sigma);
        ck.put_f64s(&format!("{p}adam_m"), &self.adam.m);
        ck.put_f64s(&format!("{p}adam_v"), &self.adam.v);
        ck.put_u64(&format!("{p}adam_t"), self.adam.t);
    }

    pub fn load(&mut self, ck: &Checkpoint, p: &str) -> Result<()> {
        let d = self.mean.len();
        let mean = ck.f64s_len(&format!("{p}mean"), d)?;
        let m = ck.f64s_len(&format!("{p}adam_m"), d)?;
        let v = ck.f64s_len(&format!("{p}adam_v"), d)?;
        self.sigma = ck.f64(&format!("{p}sigma"))?;
        self.adam = AdamState {
            m,
            v,
            t: ck.u64(&format!("{p}adam_t"))?,
        };
        self.mean = ParamVector(mean);
        Ok(())
    }
}
