use super::{argsort_desc, check_fitness, sample_isotropic, Candidates, TellReport};
use crate::cli::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::exec::RngKey;
use crate::net::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VesConfig {
    pub pop_size: usize,
    pub num_elites: usize,
    pub sigma: f64,
    pub mirrored: bool,
}

impl Default for VesConfig {
    fn default() -> Self {
        VesConfig {
            pop_size: 128,
            num_elites: 16,
            sigma: 0.02,
            mirrored: true,
        }
    }
}

/// Canonical ES: log-weighted recombination of the best candidates, fixed sigma.
#[derive(Clone, Debug, PartialEq)]
pub struct VesState {
    pub mean: ParamVector,
    pub sigma: f64,
    pub cfg: VesConfig,
    pub weights: Vec<f64>,
}

/// `w_i = ln(mu + 0.5) - ln(i)` for `i = 1..=mu`, normalised to sum to one.
pub fn log_weights(mu: usize) -> Vec<f64> {
    let raw: Vec<f64> = (1..=mu)
        .map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|w| w / s).collect()
}

impl VesState {
    pub fn new(mean: ParamVector, cfg: VesConfig) -> Result<Self> {
        if cfg.num_elites == 0 || cfg.num_elites > cfg.pop_size {
            return Err(Error::invalid("VanillaES elites must be in 1..=population"));
        }
        Ok(VesState {
            mean,
            sigma: cfg.sigma,
            weights: log_weights(cfg.num_elites),
            cfg,
        })
    }

    pub fn ask(&self, key: RngKey, n: usize) -> Result<Candidates> {
        sample_isotropic(&self.mean, self.sigma, n, self.cfg.mirrored, key, None)
    }

    pub fn tell(&mut self, cands: &Candidates, fitness: &[f64]) -> Result<TellReport> {
        check_fitness(fitness, cands.len())?;
        let mu = self.weights.len().min(cands.len());
        let order = argsort_desc(fitness);
        let mut mean = vec![0.0; self.mean.len()];
        let w = if mu == self.weights.len() {
            self.weights.clone()
        } else {
            log_weights(mu)
        };
        for (wi, &i) in w.iter().zip(&order[..mu]) {
            for (m, x) in mean.iter_mut().zip(cands.params[i].iter()) {
                *m += wi * x;
            }
        }
        self.mean = ParamVector(mean);
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_elite_weights_follow_log_formula() {
        let w = log_weights(2);
        let a = 2.5f64.ln();
        let b = 2.5f64.ln() - 2f64.ln();
        assert!((w[0] - a / (a + b)).abs() < 1e-15);
        assert!((w[0] - 0.804163).abs() < 1e-6 && (w[1] - 0.195837).abs() < 1e-6);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_elite_takes_best() {
        let cfg = VesConfig {
            pop_size: 4,
            num_elites: 1,
            ..Default::default()
        };
        let mut s = VesState::new(ParamVector(vec![0.0, 0.0]), cfg).unwrap();
        let c = s.ask(RngKey::from_seed(1), 4).unwrap();
        s.tell(&c, &[0.0, 5.0, 1.0, 2.0]).unwrap();
        assert_eq!(s.mean, c.params[1]);
    }

    #[test]
    fn identical_candidates_keep_mean() {
        let cfg = VesConfig {
            pop_size: 4,
            num_elites: 3,
            sigma: 0.0,
            ..Default::default()
        };
        let mut s = VesState::new(ParamVector(vec![0.25, -1.0]), cfg).unwrap();
        let c = s.ask(RngKey::from_seed(1), 4).unwrap();
        s.tell(&c, &[0.0, 5.0, 1.0, 2.0]).unwrap();
        for (m, e) in s.mean.iter().zip([0.25, -1.0]) {
            assert!((m - e).abs() < 1e-15);
        }
    }
}
