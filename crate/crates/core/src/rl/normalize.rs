use crate::cli::checkpoint::Checkpoint;
use crate::env::{env_reset, step_into, EnvSpec};
use crate::error::{Error, Result};
use crate::exec::RngKey;
use crate::net::Matrix;

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObsNormMode {
    None,
    /// Statistics fixed from random-action rollouts.
    Vbn,
    /// Streaming statistics updated with every batch.
    RunningStats,
}

impl ObsNormMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(ObsNormMode::None),
            "vbn" => Some(ObsNormMode::Vbn),
            "rs" | "running" => Some(ObsNormMode::RunningStats),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ObsNormMode::None => "none",
            ObsNormMode::Vbn => "vbn",
            ObsNormMode::RunningStats => "rs",
        }
    }
}

/// Per-dimension mean and population variance.
#[derive(Clone, Debug, PartialEq)]
pub struct ObsNorm {
    pub mode: ObsNormMode,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
}

impl ObsNorm {
    pub fn new(mode: ObsNormMode, dim: usize) -> Self {
        ObsNorm {
            mode,
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Two-pass statistics of `rows`, fixed thereafter.
    pub fn from_samples(mode: ObsNormMode, rows: &Matrix) -> Self {
        let (mean, var) = two_pass(rows);
        ObsNorm {
            mode,
            mean,
            var,
            count: rows.rows() as f64,
        }
    }

    /// Merges a batch into running statistics (Chan et al. parallel update).
    /// A no-op unless the mode is [`ObsNormMode::RunningStats`].
    pub fn update(&mut self, rows: &Matrix) {
        if self.mode != ObsNormMode::RunningStats || rows.rows() == 0 {
            return;
        }
        let (bm, bv) = two_pass(rows);
        let nb = rows.rows() as f64;
        let na = self.count;
        let n = na + nb;
        for j in 0..self.dim() {
            let delta = bm[j] - self.mean[j];
            let m2 = self.var[j] * na + bv[j] * nb + delta * delta * na * nb / n;
            self.mean[j] += delta * nb / n;
            self.var[j] = m2 / n;
        }
        self.count = n;
    }

    pub fn normalize_into(&self, obs: &[f64], out: &mut [f64]) {
        if self.mode == ObsNormMode::None {
            out.copy_from_slice(obs);
            return;
        }
        for j in 0..obs.len() {
            out[j] = (obs[j] - self.mean[j]) / self.var[j].sqrt().max(STD_FLOOR);
        }
    }

    pub fn normalize(&self, obs: &Matrix) -> Matrix {
        if self.mode == ObsNormMode::None {
            return obs.clone();
        }
        let mut out = obs.clone();
        for r in 0..obs.rows() {
            self.normalize_into(obs.row(r), out.row_mut(r));
        }
        out
    }

    pub fn save(&self, ck: &mut Checkpoint, p: &str) {
        ck.put_f64s(&format!("{p}mean"), &self.mean);
        ck.put_f64s(&format!("{p}var"), &self.var);
        ck.put_f64(&format!("{p}count"), self.count);
    }

    pub fn load(&mut self, ck: &Checkpoint, p: &str) -> Result<()> {
        let d = self.dim();
        self.mean = ck.f64s_len(&format!("{p}mean"), d)?;
        self.var = ck.f64s_len(&format!("{p}var"), d)?;
        self.count = ck.f64(&format!("{p}count"))?;
        Ok(())
    }
}

fn two_pass(rows: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let d = rows.cols();
    let n = rows.rows() as f64;
    let mut mean = vec![0.0; d];
    for r in rows.iter_rows() {
        for j in 0..d {
            mean[j] += r[j];
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; d];
    for r in rows.iter_rows() {
        for j in 0..d {
            let c = r[j] - mean[j];
            var[j] += c * c;
        }
    }
    for v in var.iter_mut() {
        *v /= n;
    }
    (mean, var)
}

/// Observations visited by a single auto-resetting lane under uniform random actions.
pub fn random_observations(spec: &EnvSpec, key: RngKey, n: usize) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::invalid("need at least one observation"));
    }
    let (mut state, mut obs) = env_reset(spec, key.fold_in(0));
    let mut rng = key.fold_in(1).rng();
    let mut action = vec![0.0; spec.action_dim()];
    let mut next = vec![0.0; spec.obs_dim];
    let mut rows = Vec::with_capacity(n * spec.obs_dim);
    for _ in 0..n {
        rows.extend_from_slice(&obs);
        spec.action_space.sample(&mut rng, &mut action);
        let t = step_into(spec, &state, &action, &mut next)?;
        if t.terminated || t.truncated {
            let (s, o) = env_reset(spec, t.state.rng);
            state = s;
            obs = o;
        } else {
            state = t.state;
            obs.copy_from_slice(&next);
        }
    }
    Matrix::from_vec(n, spec.obs_dim, rows)
}

/// Fits fixed statistics from `n` random-action timesteps (10000 by default).
pub fn vbn_fit(spec: &EnvSpec, key: RngKey, n: usize) -> Result<ObsNorm> {
    let rows = random_observations(spec, key, n)?;
    Ok(ObsNorm::from_samples(ObsNormMode::Vbn, &rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn two_rows() {
        let mut s = ObsNorm::new(ObsNormMode::RunningStats, 1);
        s.update(&Matrix::from_vec(2, 1, vec![0.0, 2.0]).unwrap());
        assert_eq!((s.mean[0], s.var[0]), (1.0, 1.0));
    }

    #[test]
    fn normalizing_the_mean_gives_zero() {
        let s = ObsNorm {
            mode: ObsNormMode::Vbn,
            mean: vec![1.5, -2.0],
            var: vec![4.0, 0.0],
            count: 3.0,
        };
        let mut out = [9.0; 2];
        s.normalize_into(&[1.5, -2.0], &mut out);
        assert_eq!(out, [0.0, 0.0]);
    }

    #[test]
    fn vbn_refit_is_standardized() {
        for spec in [EnvSpec::pendulum(), EnvSpec::cartpole()] {
            let rows = random_observations(&spec, RngKey::from_seed(1), 10_000).unwrap();
            let s = ObsNorm::from_samples(ObsNormMode::Vbn, &rows);
            let z = s.normalize(&rows);
            let (m, v) = two_pass(&z);
            for j in 0..spec.obs_dim {
                assert!(m[j].abs() < 1e-6);
                assert!((v[j].sqrt() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn running_matches_two_pass() {
        let mut rng = RngKey::from_seed(5).rng();
        let mut s = ObsNorm::new(ObsNormMode::RunningStats, 3);
        let mut all = Vec::new();
        for _ in 0..40 {
            let n = rng.random_range(1..20);
            let v: Vec<f64> = (0..n * 3).map(|_| rng.random::<f64>() * 10.0 - 3.0).collect();
            all.extend_from_slice(&v);
            s.update(&Matrix::from_vec(n, 3, v).unwrap());
        }
        let (m, v) = two_pass(&Matrix::from_vec(all.len() / 3, 3, all).unwrap());
        for j in 0..3 {
            assert!((s.mean[j] - m[j]).abs() < 1e-8 && (s.var[j] - v[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn normalized_stream_converges_to_standard() {
        let mut rng = RngKey::from_seed(6).rng();
        let fixed = ObsNorm {
            mode: ObsNormMode::Vbn,
            mean: vec![3.0],
            var: vec![4.0],
            count: 1.0,
        };
        let mut s = ObsNorm::new(ObsNormMode::RunningStats, 1);
        for _ in 0..200 {
            let raw: Vec<f64> = (0..100)
                .map(|_| 3.0 + 2.0 * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            s.update(&fixed.normalize(&Matrix::from_vec(100, 1, raw).unwrap()));
        }
        assert!(s.mean[0].abs() < 0.02 && (s.var[0] - 1.0).abs() < 0.02);
    }
}
