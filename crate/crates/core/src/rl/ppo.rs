use rand::seq::SliceRandom;

use super::gae::gae;
use super::normalize::ObsNorm;
use super::optim::{adam_step, clip_global_norm, AdamConfig, AdamState};
use super::policy::log_softmax;
use crate::cli::checkpoint::Checkpoint;
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::exec::{RngKey, SampleBatch};
use crate::net::{backward, forward, forward_with_tape, init_params, Head, Matrix, MlpSpec, ParamVector};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PpoConfig {
    pub actor_loss_weight: f64,
    pub critic_loss_weight: f64,
    /// Negative values reward entropy.
    pub entropy_weight: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub lr: f64,
    pub max_grad_norm: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub normalize_advantages: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            actor_loss_weight: 1.0,
            critic_loss_weight: 0.5,
            entropy_weight: -0.01,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            lr: 3e-4,
            max_grad_norm: 10.0,
            epochs: 4,
            minibatch_size: 256,
            normalize_advantages: true,
        }
    }
}

/// Actor (Gaussian or categorical head), state-value critic and their Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct PpoAgent {
    pub actor_spec: MlpSpec,
    pub critic_spec: MlpSpec,
    pub actor: ParamVector,
    pub critic: ParamVector,
    pub actor_opt: AdamState,
    pub critic_opt: AdamState,
}

impl PpoAgent {
    pub fn new(env: &EnvSpec, hidden: &[usize], layer_norm: bool, key: RngKey) -> Result<Self> {
        let (out, head) = if env.action_space.is_discrete() {
            match env.action_space {
                crate::env::ActionSpace::Discrete(k) => (k, Head::Categorical),
                _ => unreachable!(),
            }
        } else {
            (env.action_dim(), Head::gaussian())
        };
        let actor_spec = MlpSpec::new(env.obs_dim, hidden, out, head)?.with_layer_norm(layer_norm);
        let critic_spec = MlpSpec::new(env.obs_dim, hidden, 1, Head::Linear)?.with_layer_norm(layer_norm);
        let actor = init_params(&actor_spec, key.fold_in(0));
        let critic = init_params(&critic_spec, key.fold_in(1));
        Ok(PpoAgent {
            actor_opt: AdamState::new(actor.len()),
            critic_opt: AdamState::new(critic.len()),
            actor_spec,
            critic_spec,
            actor,
            critic,
        })
    }

    pub fn values(&self, obs: &Matrix) -> Result<Vec<f64>> {
        Ok(forward(&self.critic_spec, &self.critic, obs)?.output.into_vec())
    }

    pub fn save(&self, ck: &mut Checkpoint, p: &str) {
        ck.put_f64s(&format!("{p}actor"), &self.actor);
        ck.put_f64s(&format!("{p}critic"), &self.critic);
        save_adam(ck, &format!("{p}actor_opt."), &self.actor_opt);
        save_adam(ck, &format!("{p}critic_opt."), &self.critic_opt);
    }

    pub fn load(&mut self, ck: &Checkpoint, p: &str) -> Result<()> {
        self.actor = ParamVector(ck.f64s_len(&format!("{p}actor"), self.actor.len())?);
        self.critic = ParamVector(ck.f64s_len(&format!("{p}critic"), self.critic.len())?);
        load_adam(ck, &format!("{p}actor_opt."), &mut self.actor_opt)?;
        load_adam(ck, &format!("{p}critic_opt."), &mut self.critic_opt)
    }
}

pub(crate) fn save_adam(ck: &mut Checkpoint, p: &str, s: &AdamState) {
    ck.put_f64s(&format!("{p}m"), &s.m);
    ck.put_f64s(&format!("{p}v"), &s.v);
    ck.put_u64(&format!("{p}t"), s.t);
}

pub(crate) fn load_adam(ck: &Checkpoint, p: &str, s: &mut AdamState) -> Result<()> {
    s.m = ck.f64s_len(&format!("{p}m"), s.m.len())?;
    s.v = ck.f64s_len(&format!("{p}v"), s.v.len())?;
    s.t = ck.u64(&format!("{p}t"))?;
    Ok(())
}

/// Training rows: normalized observations, behaviour actions and log-probs,
/// advantages and value targets.
#[derive(Clone, Debug, PartialEq)]
pub struct PpoBatch {
    pub obs: Matrix,
    pub actions: Matrix,
    pub log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    pub fn gather(&self, idx: &[usize]) -> PpoBatch {
        PpoBatch {
            obs: self.obs.gather_rows(idx),
            actions: self.actions.gather_rows(idx),
            log_probs: idx.iter().map(|&i| self.log_probs[i]).collect(),
            advantages: idx.iter().map(|&i| self.advantages[i]).collect(),
            returns: idx.iter().map(|&i| self.returns[i]).collect(),
        }
    }
}

/// Turns a lane-major rollout of `lanes x steps` transitions into a training batch.
///
/// Truncated steps bootstrap through the time limit by adding `gamma * V(next_obs)`
/// to the reward; every episode end stops advantage propagation.
pub fn build_batch(
    agent: &PpoAgent,
    samples: &SampleBatch,
    lanes: usize,
    norm: Option<&ObsNorm>,
    cfg: &PpoConfig,
) -> Result<PpoBatch> {
    let n = samples.len();
    if lanes == 0 || n == 0 || n % lanes != 0 {
        return Err(Error::shape("rollout does not split evenly into lanes"));
    }
    let log_probs = samples
        .log_probs
        .clone()
        .ok_or_else(|| Error::invalid("PPO needs behaviour log-probabilities"))?;
    let steps = n / lanes;
    let norm_m = |m: &Matrix| match norm {
        Some(s) => s.normalize(m),
        None => m.clone(),
    };
    let obs = norm_m(&samples.obs);
    let next_obs = norm_m(&samples.next_obs);
    let v = agent.values(&obs)?;
    let v_next = agent.values(&next_obs)?;
    let mut advantages = Vec::with_capacity(n);
    let mut returns = Vec::with_capacity(n);
    for l in 0..lanes {
        let r0 = l * steps;
        let mut rewards = Vec::with_capacity(steps);
        let mut values = Vec::with_capacity(steps + 1);
        let mut ends = Vec::with_capacity(steps);
        for t in 0..steps {
            let i = r0 + t;
            let mut r = samples.rewards[i];
            if samples.truncated[i] && !samples.terminated[i] {
                r += cfg.gamma * v_next[i];
            }
            rewards.push(r);
            values.push(v[i]);
            ends.push(samples.done(i));
        }
        values.push(v_next[r0 + steps - 1]);
        let (a, ret) = gae(&rewards, &values, &ends, cfg.gamma, cfg.gae_lambda)?;
        advantages.extend(a);
        returns.extend(ret);
    }
    Ok(PpoBatch {
        obs,
        actions: samples.actions.clone(),
        log_probs,
        advantages,
        returns,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PpoLosses {
    pub total: f64,
    pub actor: f64,
    pub critic: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Weighted loss on one minibatch and its exact gradients for actor and critic.
/// Advantages are used as given.
pub fn loss_and_grad(
    actor_spec: &MlpSpec,
    actor: &[f64],
    critic_spec: &MlpSpec,
    critic: &[f64],
    mb: &PpoBatch,
    cfg: &PpoConfig,
) -> Result<(PpoLosses, ParamVector, ParamVector)> {
    let b = mb.len();
    if b == 0 {
        return Err(Error::invalid("empty minibatch"));
    }
    let bf = b as f64;
    let (out, tape) = forward_with_tape(actor_spec, actor, &mb.obs)?;
    let mut d_out = Matrix::zeros(b, actor_spec.output_dim);
    let mut d_log_std: Option<Vec<f64>> = None;
    let mut losses = PpoLosses::default();

    // d(actor loss)/d(new log-prob) for each row.
    let surrogate_grad = |lp_new: f64, i: usize, losses: &mut PpoLosses| -> f64 {
        let log_ratio = lp_new - mb.log_probs[i];
        let ratio = log_ratio.exp();
        let adv = mb.advantages[i];
        let clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
        let s1 = ratio * adv;
        let s2 = clipped * adv;
        losses.actor -= s1.min(s2) / bf;
        losses.approx_kl += ((ratio - 1.0) - log_ratio) / bf;
        if (ratio - 1.0).abs() > cfg.clip_eps {
            losses.clip_fraction += 1.0 / bf;
        }
        if s1 <= s2 {
            -adv * ratio / bf
        } else {
            0.0
        }
    };

    match actor_spec.head {
        Head::Categorical => {
            let k = actor_spec.output_dim;
            for i in 0..b {
                let a = mb.actions.get(i, 0) as usize;
                if a >= k {
                    return Err(Error::invalid(format!("action {a} outside {k} categories")));
                }
                let lp = log_softmax(out.output.row(i));
                let g = surrogate_grad(lp[a], i, &mut losses);
                let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
                let h: f64 = -p.iter().zip(&lp).map(|(p, l)| p * l).sum::<f64>();
                losses.entropy += h / bf;
                let row = d_out.row_mut(i);
                for j in 0..k {
                    let dlp = if j == a { 1.0 - p[j] } else { -p[j] };
                    let dh = -p[j] * (lp[j] + h);
                    row[j] = cfg.actor_loss_weight * g * dlp + cfg.entropy_weight * dh / bf;
                }
            }
        }
        Head::Gaussian { .. } => {
            let d = actor_spec.output_dim;
            let log_std = out.log_std.as_ref().expect("gaussian head");
            let inv_var: Vec<f64> = log_std.iter().map(|s| (-2.0 * s).exp()).collect();
            let mut dls = vec![0.0; d];
            for i in 0..b {
                let mu = out.output.row(i);
                let a = mb.actions.row(i);
                let mut lp = 0.0;
                for j in 0..d {
                    let c = a[j] - mu[j];
                    lp += -0.5 * c * c * inv_var[j] - log_std[j] - 0.5 * LN_2PI;
                }
                let g = surrogate_grad(lp, i, &mut losses);
                let row = d_out.row_mut(i);
                for j in 0..d {
                    let c = a[j] - mu[j];
                    row[j] = cfg.actor_loss_weight * g * c * inv_var[j];
                    dls[j] += cfg.actor_loss_weight * g * (c * c * inv_var[j] - 1.0);
                }
            }
            let h: f64 = log_std.iter().map(|s| s + 0.5 * (1.0 + LN_2PI)).sum();
            losses.entropy = h;
            for g in dls.iter_mut() {
                *g += cfg.entropy_weight;
            }
            d_log_std = Some(dls);
        }
        _ => return Err(Error::invalid("PPO needs a Gaussian or categorical actor")),
    }

    let (vout, vtape) = forward_with_tape(critic_spec, critic, &mb.obs)?;
    let mut d_v = Matrix::zeros(b, 1);
    for i in 0..b {
        let diff = vout.output.get(i, 0) - mb.returns[i];
        losses.critic += 0.5 * diff * diff / bf;
        d_v.row_mut(i)[0] = cfg.critic_loss_weight * diff / bf;
    }
    losses.total = cfg.actor_loss_weight * losses.actor
        + cfg.critic_loss_weight * losses.critic
        + cfg.entropy_weight * losses.entropy;
    if !losses.total.is_finite() {
        return Err(Error::numeric(format!("non-finite PPO loss {}", losses.total)));
    }
    let ga = backward(actor_spec, actor, tape, &d_out, d_log_std.as_deref())?.params;
    let gc = backward(critic_spec, critic, vtape, &d_v, None)?.params;
    Ok((losses, ga, gc))
}

fn standardize(x: &mut [f64]) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt() + 1e-8;
    for v in x.iter_mut() {
        *v = (*v - mean) / sd;
    }
}

/// Epochs of shuffled minibatch updates; returns losses averaged over minibatches.
pub fn ppo_update(agent: &mut PpoAgent, batch: &PpoBatch, cfg: &PpoConfig, key: RngKey) -> Result<PpoLosses> {
    let n = batch.len();
    if n == 0 || cfg.minibatch_size == 0 {
        return Err(Error::invalid("PPO update needs data and a positive minibatch size"));
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut avg = PpoLosses::default();
    let mut count = 0.0f64;
    let mut idx: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        idx.shuffle(&mut key.fold_in(epoch as u64).rng());
        for chunk in idx.chunks(cfg.minibatch_size) {
            let mut mb = batch.gather(chunk);
            if cfg.normalize_advantages && mb.len() > 1 {
                standardize(&mut mb.advantages);
            }
            let (l, mut ga, mut gc) = loss_and_grad(
                &agent.actor_spec,
                &agent.actor,
                &agent.critic_spec,
                &agent.critic,
                &mb,
                cfg,
            )?;
            clip_global_norm(&mut [&mut ga[..], &mut gc[..]], cfg.max_grad_norm);
            adam_step(&mut agent.actor, &ga, &mut agent.actor_opt, &adam);
            adam_step(&mut agent.critic, &gc, &mut agent.critic_opt, &adam);
            avg.total += l.total;
            avg.actor += l.actor;
            avg.critic += l.critic;
            avg.entropy += l.entropy;
            avg.approx_kl += l.approx_kl;
            avg.clip_fraction += l.clip_fraction;
            count += 1.0;
        }
    }
    if !agent.actor.is_finite() || !agent.critic.is_finite() {
        return Err(Error::numeric("PPO update produced non-finite parameters"));
    }
    for v in [
        &mut avg.total,
        &mut avg.actor,
        &mut avg.critic,
        &mut avg.entropy,
        &mut avg.approx_kl,
        &mut avg.clip_fraction,
    ] {
        *v /= count.max(1.0);
    }
    Ok(avg)
}
