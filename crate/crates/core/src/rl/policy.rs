use rand::Rng;
use rand_distr::StandardNormal;

use super::normalize::ObsNorm;
use crate::env::ActionSpace;
use crate::error::{Error, Result};
use crate::exec::{Policy, PolicyOutput, RngKey};
use crate::net::{forward, Head, Matrix, MlpSpec};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActMode {
    /// Greedy: argmax for logits, the mean for Gaussians.
    Deterministic,
    /// Sample from the head's distribution and report log-probabilities.
    Sample,
    /// Deterministic output plus `N(0, std^2)` noise, clipped to the action bounds.
    Explore { std: f64 },
}

/// Borrowed MLP policy with optional observation normalization and critic.
#[derive(Clone, Copy, Debug)]
pub struct MlpPolicy<'a> {
    pub spec: &'a MlpSpec,
    pub params: &'a [f64],
    pub action_space: ActionSpace,
    pub mode: ActMode,
    pub norm: Option<&'a ObsNorm>,
    /// State-value network whose estimate is attached to every action.
    pub critic: Option<(&'a MlpSpec, &'a [f64])>,
}

impl<'a> MlpPolicy<'a> {
    pub fn new(spec: &'a MlpSpec, params: &'a [f64], action_space: ActionSpace, mode: ActMode) -> Self {
        MlpPolicy {
            spec,
            params,
            action_space,
            mode,
            norm: None,
            critic: None,
        }
    }

    pub fn with_norm(mut self, norm: Option<&'a ObsNorm>) -> Self {
        self.norm = norm;
        self
    }

    pub fn with_critic(mut self, spec: &'a MlpSpec, params: &'a [f64]) -> Self {
        self.critic = Some((spec, params));
        self
    }
}

impl Policy for MlpPolicy<'_> {
    fn act(&self, obs: &Matrix, keys: &[RngKey]) -> Result<PolicyOutput> {
        let x = match self.norm {
            Some(n) => n.normalize(obs),
            None => obs.clone(),
        };
        let out = forward(self.spec, self.params, &x)?;
        let n = obs.rows();
        let ad = self.action_space.dim();
        let mut actions = Matrix::zeros(n, ad);
        let mut log_probs = None;
        match (self.spec.head, self.action_space) {
            (Head::Categorical, ActionSpace::Discrete(k)) => {
                if out.output.cols() != k {
                    return Err(Error::shape("logit width differs from the action count"));
                }
                let mut lps = Vec::with_capacity(n);
                for r in 0..n {
                    let logits = out.output.row(r);
                    let a = match self.mode {
                        ActMode::Sample => sample_categorical(logits, keys[r]),
                        _ => argmax(logits),
                    };
                    actions.row_mut(r)[0] = a as f64;
                    lps.push(log_softmax(logits)[a]);
                }
                if self.mode == ActMode::Sample {
                    log_probs = Some(lps);
                }
            }
            (Head::Gaussian { .. }, ActionSpace::Continuous { low, high, dim }) => {
                let log_std = out.log_std.as_ref().expect("gaussian head");
                let mut lps = Vec::with_capacity(n);
                for r in 0..n {
                    let mu = out.output.row(r);
                    let row = actions.row_mut(r);
                    match self.mode {
                        ActMode::Sample => {
                            let mut rng = keys[r].rng();
                            let mut lp = 0.0;
                            for j in 0..dim {
                                let z: f64 = rng.sample(StandardNormal);
                                row[j] = mu[j] + log_std[j].exp() * z;
                                lp += -0.5 * z * z - log_std[j] - 0.5 * LN_2PI;
                            }
                            lps.push(lp);
                        }
                        ActMode::Deterministic => {
                            for j in 0..dim {
                                row[j] = mu[j].clamp(low, high);
                            }
                        }
                        ActMode::Explore { std } => explore(mu, row, std, low, high, keys[r]),
                    }
                }
                if self.mode == ActMode::Sample {
                    log_probs = Some(lps);
                }
            }
            (Head::DeterministicTanh { .. } | Head::Linear, ActionSpace::Continuous { low, high, .. }) => {
                for r in 0..n {
                    let o = out.output.row(r);
                    let row = actions.row_mut(r);
                    match self.mode {
                        ActMode::Explore { std } => explore(o, row, std, low, high, keys[r]),
                        _ => {
                            for (a, v) in row.iter_mut().zip(o) {
                                *a = v.clamp(low, high);
                            }
                        }
                    }
                }
            }
            (Head::DeterministicTanh { .. } | Head::Linear, ActionSpace::Discrete(k)) => {
                if out.output.cols() != k {
                    return Err(Error::shape("output width differs from the action count"));
                }
                for r in 0..n {
                    actions.row_mut(r)[0] = argmax(out.output.row(r)) as f64;
                }
            }
            _ => return Err(Error::invalid("network head does not fit the action space")),
        }
        let values = match self.critic {
            Some((cs, cp)) => Some(forward(cs, cp, &x)?.output.into_vec()),
            None => None,
        };
        Ok(PolicyOutput {
            actions,
            log_probs,
            values,
        })
    }
}

/// Uniformly random valid actions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RandomPolicy(pub ActionSpace);

impl Policy for RandomPolicy {
    fn act(&self, obs: &Matrix, keys: &[RngKey]) -> Result<PolicyOutput> {
        let mut actions = Matrix::zeros(obs.rows(), self.0.dim());
        for r in 0..obs.rows() {
            self.0.sample(&mut keys[r].rng(), actions.row_mut(r));
        }
        Ok(PolicyOutput::actions(actions))
    }
}

fn explore(det: &[f64], row: &mut [f64], std: f64, low: f64, high: f64, key: RngKey) {
    let mut rng = key.rng();
    for (a, v) in row.iter_mut().zip(det) {
        let z: f64 = rng.sample(StandardNormal);
        *a = (v + std * z).clamp(low, high);
    }
}

/// First index of the maximum.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..x.len() {
        if x[i] > x[best] {
            best = i;
        }
    }
    best
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn sample_categorical(logits: &[f64], key: RngKey) -> usize {
    let lp = log_softmax(logits);
    let u: f64 = key.rng().random();
    let mut acc = 0.0;
    for (i, l) in lp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return i;
        }
    }
    lp.len() - 1
}

/// Log-density of `a` under a diagonal Gaussian.
pub fn gaussian_log_prob(a: &[f64], mu: &[f64], log_std: &[f64]) -> f64 {
    let mut lp = 0.0;
    for j in 0..a.len() {
        let z = (a[j] - mu[j]) / log_std[j].exp();
        lp += -0.5 * z * z - log_std[j] - 0.5 * LN_2PI;
    }
    lp
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvSpec;
    use crate::net::init_params;

    #[test]
    fn sampled_log_prob_matches_density() {
        let spec = MlpSpec::new(3, &[8], 1, Head::gaussian()).unwrap();
        let p = init_params(&spec, RngKey::from_seed(0));
        let pol = MlpPolicy::new(&spec, &p, EnvSpec::pendulum().action_space, ActMode::Sample);
        let obs = Matrix::from_vec(2, 3, vec![0.1, 0.2, 0.3, -1.0, 0.5, 2.0]).unwrap();
        let keys = [RngKey::from_seed(1), RngKey::from_seed(2)];
        let out = pol.act(&obs, &keys).unwrap();
        let h = forward(&spec, &p, &obs).unwrap();
        let ls = h.log_std.unwrap();
        for r in 0..2 {
            let lp = gaussian_log_prob(out.actions.row(r), h.output.row(r), &ls);
            assert!((lp - out.log_probs.as_ref().unwrap()[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn categorical_sampling_frequencies() {
        let logits = [0.0, 1.0f64.ln() + 1.0, -1.0];
        let lp = log_softmax(&logits);
        let mut counts = [0.0; 3];
        let n = 50_000;
        for s in 0..n {
            counts[sample_categorical(&logits, RngKey::from_seed(s))] += 1.0;
        }
        for i in 0..3 {
            let p = lp[i].exp();
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((counts[i] - n as f64 * p).abs() < 5.0 * sd);
        }
    }

    #[test]
    fn explore_respects_bounds() {
        let spec = MlpSpec::new(3, &[4], 1, Head::DeterministicTanh { scale: 2.0 }).unwrap();
        let p = init_params(&spec, RngKey::from_seed(0));
        let pol = MlpPolicy::new(&spec, &p, EnvSpec::pendulum().action_space, ActMode::Explore { std: 10.0 });
        let obs = Matrix::zeros(64, 3);
        let keys: Vec<RngKey> = (0..64).map(RngKey::from_seed).collect();
        let a = pol.act(&obs, &keys).unwrap().actions;
        assert!(a.as_slice().iter().all(|v| (-2.0..=2.0).contains(v)));
        assert!(a.as_slice().iter().any(|v| v.abs() == 2.0));
    }
}
