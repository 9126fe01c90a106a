use super::{check_fitness, sample_isotropic, Candidates, TellReport};
use crate::cli::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::exec::RngKey;
use crate::net::ParamVector;
use crate::rl::sgd_step;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArsConfig {
    /// Number of evaluated candidates, two per direction.
    pub pop_size: usize,
    pub num_elites: usize,
    pub sigma: f64,
    pub lr: f64,
}

impl Default for ArsConfig {
    fn default() -> Self {
        ArsConfig {
            pop_size: 128,
            num_elites: 16,
            sigma: 0.03,
            lr: 0.02,
        }
    }
}

/// Augmented random search with top-direction selection and reward-std scaling.
/// Observation statistics live with the policy, not here.
#[derive(Clone, Debug, PartialEq)]
pub struct ArsState {
    pub mean: ParamVector,
    pub sigma: f64,
    pub cfg: ArsConfig,
}

impl ArsState {
    pub fn new(mean: ParamVector, cfg: ArsConfig) -> Result<Self> {
        if cfg.num_elites == 0 || 2 * cfg.num_elites > cfg.pop_size {
            return Err(Error::invalid(format!(
                "ARS needs 1 <= elites <= population / 2, got {} of {}",
                cfg.num_elites, cfg.pop_size
            )));
        }
        Ok(ArsState {
            mean,
            sigma: cfg.sigma,
            cfg,
        })
    }

    /// Mirrored pairs: candidate `2k` is `mean + sigma d_k`, `2k + 1` is `mean - sigma d_k`.
    pub fn ask(&self, key: RngKey, n: usize) -> Result<Candidates> {
        sample_isotropic(&self.mean, self.sigma, n, true, key, None)
    }

    pub fn tell(&mut self, cands: &Candidates, fitness: &[f64]) -> Result<TellReport> {
        check_fitness(fitness, cands.len())?;
        if !cands.mirrored {
            return Err(Error::invalid("ARS needs mirrored candidates"));
        }
        let plus: Vec<f64> = fitness.iter().step_by(2).copied().collect();
        let minus: Vec<f64> = fitness.iter().skip(1).step_by(2).copied().collect();
        self.tell_pairs(&cands.directions, &plus, &minus)
    }

    /// Update from per-direction reward pairs. Skips the step when the elite rewards have zero spread.
    pub fn tell_pairs(
        &mut self,
        directions: &[Vec<f64>],
        r_plus: &[f64],
        r_minus: &[f64],
    ) -> Result<TellReport> {
        let k = directions.len();
        if r_plus.len() != k || r_minus.len() != k {
            return Err(Error::shape("one reward pair per direction"));
        }
        let b = self.cfg.num_elites.min(k);
        let score: Vec<f64> = r_plus.iter().zip(r_minus).map(|(a, b)| a.max(*b)).collect();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&x, &y| score[y].total_cmp(&score[x]));
        let elite = &order[..b];
        let rewards: Vec<f64> = elite.iter().flat_map(|&i| [r_plus[i], r_minus[i]]).collect();
        let mu = rewards.iter().sum::<f64>() / rewards.len() as f64;
        let sigma_r =
            (rewards.iter().map(|r| (r - mu) * (r - mu)).sum::<f64>() / rewards.len() as f64).sqrt();
        if sigma_r == 0.0 {
            return Ok(TellReport {
                degenerate: true,
                ..Default::default()
            });
        }
        let d = self.mean.len();
        let mut step = vec![0.0; d];
        for &i in elite {
            let w = r_plus[i] - r_minus[i];
            for (s, e) in step.iter_mut().zip(&directions[i]) {
                *s += w * e;
            }
        }
        // ascent: mean += lr / (b sigma_R) * step
        let scale = 1.0 / (b as f64 * sigma_r);
        let neg: Vec<f64> = step.iter().map(|v| -v * scale).collect();
        sgd_step(&mut self.mean, &neg, self.cfg.lr);
        Ok(TellReport::default())
    }

    pub fn save(&self, ck: &mut Checkpoint, p: &str) {
        ck.put_f64s(&format!("{p}mean"), &self.mean);
    }

    pub fn load(&mut self, ck: &Checkpoint, p: &str) -> Result<()> {
        self.mean = ParamVector(ck.f64s_len(&format!("{p}mean"), self.mean.len())?);
        Ok(())
    }
}
