use super::{argsort_desc, check_fitness, standard_normal, Candidates, TellReport};
use crate::cli::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::exec::RngKey;
use crate::net::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CemConfig {
    pub pop_size: usize,
    pub num_elites: usize,
    pub init_var: f64,
    pub noise_start: f64,
    pub noise_end: f64,
    /// Iterations over which the noise floor decays from start to end.
    pub planned_iterations: u64,
}

impl Default for CemConfig {
    fn default() -> Self {
        CemConfig {
            pop_size: 10,
            num_elites: 5,
            init_var: 1e-3,
            noise_start: 1e-3,
            noise_end: 1e-5,
            planned_iterations: 1000,
        }
    }
}

/// Diagonal cross-entropy method with a decaying additive variance floor.
#[derive(Clone, Debug, PartialEq)]
pub struct CemState {
    pub mean: ParamVector,
    pub var: ParamVector,
    pub iteration: u64,
    pub cfg: CemConfig,
}

impl CemState {
    pub fn new(mean: ParamVector, cfg: CemConfig) -> Result<Self> {
        if cfg.num_elites == 0 || cfg.num_elites > cfg.pop_size {
            return Err(Error::invalid("CEM elites must be in 1..=population"));
        }
        if !(cfg.noise_start >= cfg.noise_end && cfg.noise_end > 0.0 && cfg.init_var > 0.0) {
            return Err(Error::invalid("CEM needs init_var > 0 and noise_start >= noise_end > 0"));
        }
        let d = mean.len();
        Ok(CemState {
            mean,
            var: ParamVector(vec![cfg.init_var; d]),
            iteration: 0,
            cfg,
        })
    }

    /// Floor after `iteration` tells: exponential interpolation between the endpoints.
    pub fn noise_floor(&self, iteration: u64) -> f64 {
        let n = self.cfg.planned_iterations.max(2) - 1;
        let frac = iteration.min(n) as f64 / n as f64;
        self.cfg.noise_start * (self.cfg.noise_end / self.cfg.noise_start).powf(frac)
    }

    pub fn ask(&self, key: RngKey, n: usize) -> Result<Candidates> {
        if n < 2 {
            return Err(Error::invalid("population size must be at least 2"));
        }
        let d = self.mean.len();
        let mut params = Vec::with_capacity(n);
        let mut directions = Vec::with_capacity(n);
        for k in 0..n {
            let z = standard_normal(key.fold_in(k as u64), d);
            let x: Vec<f64> = (0..d)
                .map(|i| self.mean[i] + self.var[i].sqrt() * z[i])
                .collect();
            params.push(ParamVector(x));
            directions.push(z);
        }
        Ok(Candidates {
            params,
            directions,
            mirrored: false,
        })
    }

    /// Refits on the top elites: uniform-weight mean, population variance around
    /// the new mean, plus the current floor.
    pub fn tell(&mut self, cands: &Candidates, fitness: &[f64]) -> Result<TellReport> {
        check_fitness(fitness, cands.len())?;
        let h = self.cfg.num_elites.min(cands.len());
        let order = argsort_desc(fitness);
        let elites: Vec<&ParamVector> = order[..h].iter().map(|&i| &cands.params[i]).collect();
        self.refit(&elites);
        Ok(TellReport::default())
    }

    /// Refit from an explicit elite set (used when fitnesses are computed elsewhere).
    pub fn refit(&mut self, elites: &[&ParamVector]) {
        let d = self.mean.len();
        let h = elites.len() as f64;
        let floor = self.noise_floor(self.iteration);
        let mut mean = vec![0.0; d];
        for e in elites {
            for (m, x) in mean.iter_mut().zip(e.iter()) {
                *m += x;
            }
        }
        for m in mean.iter_mut() {
            *m /= h;
        }
        let mut var = vec![0.0; d];
        for e in elites {
            for i in 0..d {
                let c = e[i] - mean[i];
                var[i] += c * c;
            }
        }
        for v in var.iter_mut() {
            *v = *v / h + floor;
        }
        self.mean = ParamVector(mean);
        self.var = ParamVector(var);
        self.iteration += 1;
    }

    pub fn save(&self, ck: &mut Checkpoint, p: &str) {
        ck.put_f64s(&format!("{p}mean"), &self.mean);
        ck.put_f64s(&format!("{p}var"), &self.var);
        ck.put_u64(&format!("{p}iteration"), self.iteration);
    }

    pub fn load(&mut self, ck: &Checkpoint, p: &str) -> Result<()> {
        let d = self.mean.len();
        let mean = ck.f64s_len(&format!("{p}mean"), d)?;
        let var = ck.f64s_len(&format!("{p}var"), d)?;
        self.iteration = ck.u64(&format!("{p}iteration"))?;
        self.mean = ParamVector(mean);
        self.var = ParamVector(var);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_point_elites() {
        let cfg = CemConfig {
            pop_size: 2,
            num_elites: 2,
            ..Default::default()
        };
        let mut s = CemState::new(ParamVector(vec![5.0]), cfg).unwrap();
        let floor = s.noise_floor(0);
        s.refit(&[&ParamVector(vec![0.0]), &ParamVector(vec![2.0])]);
        assert_eq!(s.mean[0], 1.0);
        assert_eq!(s.var[0], 1.0 + floor);
    }

    #[test]
    fn identical_elites_give_floor() {
        let mut s = CemState::new(ParamVector(vec![0.0; 3]), CemConfig::default()).unwrap();
        let e = ParamVector(vec![0.3, 0.1, -2.0]);
        s.refit(&[&e, &e, &e]);
        assert!(s.var.iter().all(|v| *v == 1e-3));
    }

    #[test]
    fn floor_schedule_endpoints() {
        let cfg = CemConfig {
            planned_iterations: 11,
            ..Default::default()
        };
        let s = CemState::new(ParamVector(vec![0.0]), cfg).unwrap();
        assert_eq!(s.noise_floor(0), 1e-3);
        assert!((s.noise_floor(10) - 1e-5).abs() < 1e-18);
        assert!((s.noise_floor(5) - 1e-4).abs() < 1e-15);
        assert!((s.noise_floor(500) - 1e-5).abs() < 1e-18);
        assert_eq!((CemConfig::default().pop_size, CemConfig::default().num_elites), (10, 5));
    }

    proptest! {
        #[test]
        fn variance_stays_above_floor(seed in 0u64..1000, iters in 1usize..30) {
            let cfg = CemConfig { planned_iterations: 20, ..Default::default() };
            let mut s = CemState::new(ParamVector(vec![0.0; 4]), cfg).unwrap();
            for t in 0..iters {
                let floor = s.noise_floor(s.iteration);
                let c = s.ask(RngKey::from_seed(seed).fold_in(t as u64), 10).unwrap();
                let f: Vec<f64> = c.params.iter().map(|p| -p.iter().map(|v| v * v).sum::<f64>()).collect();
                s.tell(&c, &f).unwrap();
                prop_assert!(s.var.iter().all(|v| *v >= floor && *v >= 1e-5));
            }
        }
    }
}
