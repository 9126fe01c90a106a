use rand::Rng;
use rand_distr::StandardNormal;

use super::optim::{adam_step, AdamConfig, AdamState};
use super::ppo::{load_adam, save_adam};
use crate::cli::checkpoint::Checkpoint;
use crate::env::{ActionSpace, EnvSpec};
use crate::error::{Error, Result};
use crate::exec::{RngKey, SampleBatch};
use crate::net::{backward, forward, forward_with_tape, init_params, Head, Matrix, MlpSpec, ParamVector};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Td3Config {
    pub gamma: f64,
    pub tau: f64,
    /// Std of the Gaussian noise added to rollout actions.
    pub exploration_noise: f64,
    /// Std of the target-policy smoothing noise.
    pub policy_noise: f64,
    pub noise_clip: f64,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Critic steps per actor step (and target update).
    pub actor_update_interval: u64,
}

impl Default for Td3Config {
    fn default() -> Self {
        Td3Config {
            gamma: 0.99,
            tau: 0.005,
            exploration_noise: 0.1,
            policy_noise: 0.2,
            noise_clip: 0.5,
            batch_size: 256,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            actor_update_interval: 2,
        }
    }
}

pub(crate) fn action_bounds(env: &EnvSpec) -> Result<(f64, f64)> {
    match env.action_space {
        ActionSpace::Continuous { low, high, .. } => Ok((low, high)),
        ActionSpace::Discrete(_) => Err(Error::invalid("TD3 needs a continuous action space")),
    }
}

/// Deterministic actor with its target copy.
#[derive(Clone, Debug, PartialEq)]
pub struct Actor {
    pub params: ParamVector,
    pub target: ParamVector,
    pub opt: AdamState,
}

impl Actor {
    pub fn new(params: ParamVector) -> Self {
        Actor {
            target: params.clone(),
            opt: AdamState::new(params.len()),
            params,
        }
    }

    pub fn save(&self, ck: &mut Checkpoint, p: &str) {
        ck.put_f64s(&format!("{p}params"), &self.params);
        ck.put_f64s(&format!("{p}target"), &self.target);
        save_adam(ck, &format!("{p}opt."), &self.opt);
    }

    pub fn load(&mut self, ck: &Checkpoint, p: &str) -> Result<()> {
        let n = self.params.len();
        self.params = ParamVector(ck.f64s_len(&format!("{p}params"), n)?);
        self.target = ParamVector(ck.f64s_len(&format!("{p}target"), n)?);
        load_adam(ck, &format!("{p}opt."), &mut self.opt)
    }
}

/// Two independently initialized Q-networks over `(obs, action)` and their targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TwinCritic {
    pub q1: ParamVector,
    pub q2: ParamVector,
    pub q1_target: ParamVector,
    pub q2_target: ParamVector,
    pub opt1: AdamState,
    pub opt2: AdamState,
}

impl TwinCritic {
    pub fn new(spec: &MlpSpec, key: RngKey) -> Self {
        let q1 = init_params(spec, key.fold_in(0));
        let q2 = init_params(spec, key.fold_in(1));
        TwinCritic {
            q1_target: q1.clone(),
            q2_target: q2.clone(),
            opt1: AdamState::new(q1.len()),
            opt2: AdamState::new(q2.len()),
            q1,
            q2,
        }
    }

    pub fn save(&self, ck: &mut Checkpoint, p: &str) {
        ck.put_f64s(&format!("{p}q1"), &self.q1);
        ck.put_f64s(&format!("{p}q2"), &self.q2);
        ck.put_f64s(&format!("{p}q1_target"), &self.q1_target);
        ck.put_f64s(&format!("{p}q2_target"), &self.q2_target);
        save_adam(ck, &format!("{p}opt1."), &self.opt1);
        save_adam(ck, &format!("{p}opt2."), &self.opt2);
    }

    pub fn load(&mut self, ck: &Checkpoint, p: &str) -> Result<()> {
        let n = self.q1.len();
        self.q1 = ParamVector(ck.f64s_len(&format!("{p}q1"), n)?);
        self.q2 = ParamVector(ck.f64s_len(&format!("{p}q2"), n)?);
        self.q1_target = ParamVector(ck.f64s_len(&format!("{p}q1_target"), n)?);
        self.q2_target = ParamVector(ck.f64s_len(&format!("{p}q2_target"), n)?);
        load_adam(ck, &format!("{p}opt1."), &mut self.opt1)?;
        load_adam(ck, &format!("{p}opt2."), &mut self.opt2)
    }

    /// Soft-updates both target critics.
    pub fn soft_update(&mut self, tau: f64) {
        soft_update(&mut self.q1_target, &self.q1, tau);
        soft_update(&mut self.q2_target, &self.q2, tau);
    }
}

/// `target <- tau * online + (1 - tau) * target`.
pub fn soft_update(target: &mut [f64], online: &[f64], tau: f64) {
    for (t, o) in target.iter_mut().zip(online) {
        *t = tau * o + (1.0 - tau) * *t;
    }
}

/// Network shapes shared by every TD3-style workflow.
#[derive(Clone, Debug, PartialEq)]
pub struct Td3Nets {
    pub actor: MlpSpec,
    pub critic: MlpSpec,
    pub low: f64,
    pub high: f64,
}

impl Td3Nets {
    pub fn new(env: &EnvSpec, hidden: &[usize], layer_norm: bool) -> Result<Self> {
        let (low, high) = action_bounds(env)?;
        if low != -high {
            return Err(Error::invalid("TD3 actors assume symmetric action bounds"));
        }
        let ad = env.action_dim();
        Ok(Td3Nets {
            actor: MlpSpec::new(env.obs_dim, hidden, ad, Head::DeterministicTanh { scale: high })?
                .with_layer_norm(layer_norm),
            critic: MlpSpec::new(env.obs_dim + ad, hidden, 1, Head::Linear)?.with_layer_norm(layer_norm),
            low,
            high,
        })
    }

    /// `y = r + gamma * (1 - terminated) * min(Q1', Q2')(s', clip(pi'(s') + clip(noise)))`.
    pub fn targets(
        &self,
        critic: &TwinCritic,
        actor_target: &[f64],
        batch: &SampleBatch,
        key: RngKey,
        cfg: &Td3Config,
    ) -> Result<Vec<f64>> {
        let mut a = forward(&self.actor, actor_target, &batch.next_obs)?.output;
        let mut rng = key.rng();
        for v in a.as_mut_slice() {
            let z: f64 = rng.sample(StandardNormal);
            let noise = (cfg.policy_noise * z).clamp(-cfg.noise_clip, cfg.noise_clip);
            *v = (*v + noise).clamp(self.low, self.high);
        }
        let x = batch.next_obs.hcat(&a)?;
        let t1 = forward(&self.critic, &critic.q1_target, &x)?.output;
        let t2 = forward(&self.critic, &critic.q2_target, &x)?.output;
        Ok((0..batch.len())
            .map(|i| {
                let live = if batch.terminated[i] { 0.0 } else { 1.0 };
                batch.rewards[i] + cfg.gamma * live * t1.get(i, 0).min(t2.get(i, 0))
            })
            .collect())
    }

    /// Sum of the two critics' mean squared errors to `y`, with gradients.
    pub fn critic_loss_and_grad(
        &self,
        q1: &[f64],
        q2: &[f64],
        obs_actions: &Matrix,
        y: &[f64],
    ) -> Result<(f64, ParamVector, ParamVector)> {
        let b = y.len() as f64;
        let mut loss = 0.0;
        let mut grads = Vec::with_capacity(2);
        for q in [q1, q2] {
            let (out, tape) = forward_with_tape(&self.critic, q, obs_actions)?;
            let mut d = Matrix::zeros(y.len(), 1);
            for i in 0..y.len() {
                let diff = out.output.get(i, 0) - y[i];
                loss += diff * diff / b;
                d.row_mut(i)[0] = 2.0 * diff / b;
            }
            grads.push(backward(&self.critic, q, tape, &d, None)?.params);
        }
        let g2 = grads.pop().expect("two critics");
        let g1 = grads.pop().expect("two critics");
        Ok((loss, g1, g2))
    }

    /// `-mean Q1(s, pi(s))` and its gradient with respect to the actor.
    pub fn actor_loss_and_grad(&self, actor: &[f64], q1: &[f64], obs: &Matrix) -> Result<(f64, ParamVector)> {
        let b = obs.rows();
        let (a, atape) = forward_with_tape(&self.actor, actor, obs)?;
        let x = obs.hcat(&a.output)?;
        let (q, qtape) = forward_with_tape(&self.critic, q1, &x)?;
        let loss = -q.output.as_slice().iter().sum::<f64>() / b as f64;
        let dq = Matrix::from_vec(b, 1, vec![-1.0 / b as f64; b])?;
        let dx = backward(&self.critic, q1, qtape, &dq, None)?.input;
        let od = obs.cols();
        let da = dx.columns(od, dx.cols());
        Ok((loss, backward(&self.actor, actor, atape, &da, None)?.params))
    }

    /// One critic step towards precomputed targets.
    pub fn critic_step(&self, critic: &mut TwinCritic, batch: &SampleBatch, y: &[f64], cfg: &Td3Config) -> Result<f64> {
        let x = batch.obs.hcat(&batch.actions)?;
        let (loss, g1, g2) = self.critic_loss_and_grad(&critic.q1, &critic.q2, &x, y)?;
        if !loss.is_finite() {
            return Err(Error::numeric(format!("non-finite critic loss {loss}")));
        }
        let adam = AdamConfig::with_lr(cfg.critic_lr);
        adam_step(&mut critic.q1, &g1, &mut critic.opt1, &adam);
        adam_step(&mut critic.q2, &g2, &mut critic.opt2, &adam);
        Ok(loss)
    }

    /// One actor ascent step on `Q1`.
    pub fn actor_step(&self, actor: &mut Actor, critic: &TwinCritic, obs: &Matrix, cfg: &Td3Config) -> Result<f64> {
        let (loss, g) = self.actor_loss_and_grad(&actor.params, &critic.q1, obs)?;
        if !loss.is_finite() {
            return Err(Error::numeric(format!("non-finite actor loss {loss}")));
        }
        adam_step(&mut actor.params, &g, &mut actor.opt, &AdamConfig::with_lr(cfg.actor_lr));
        Ok(loss)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Td3Losses {
    pub critic: f64,
    pub actor: Option<f64>,
}

/// Single actor with twin critics.
#[derive(Clone, Debug, PartialEq)]
pub struct Td3Agent {
    pub nets: Td3Nets,
    pub actor: Actor,
    pub critic: TwinCritic,
    /// Critic steps taken so far.
    pub updates: u64,
}

impl Td3Agent {
    pub fn new(nets: Td3Nets, key: RngKey) -> Self {
        let actor = Actor::new(init_params(&nets.actor, key.fold_in(0)));
        let critic = TwinCritic::new(&nets.critic, key.fold_in(1));
        Td3Agent {
            nets,
            actor,
            critic,
            updates: 0,
        }
    }

    /// One critic step; every `actor_update_interval` steps also an actor step
    /// followed by soft updates of all targets.
    pub fn update(&mut self, batch: &SampleBatch, key: RngKey, cfg: &Td3Config) -> Result<Td3Losses> {
        if batch.is_empty() {
            return Err(Error::InsufficientData { size: 0, needed: 1 });
        }
        let y = self.nets.targets(&self.critic, &self.actor.target, batch, key, cfg)?;
        let critic = self.nets.critic_step(&mut self.critic, batch, &y, cfg)?;
        self.updates += 1;
        let mut actor = None;
        if self.updates % cfg.actor_update_interval.max(1) == 0 {
            actor = Some(self.nets.actor_step(&mut self.actor, &self.critic, &batch.obs, cfg)?);
            soft_update(&mut self.actor.target, &self.actor.params, cfg.tau);
            self.critic.soft_update(cfg.tau);
        }
        Ok(Td3Losses { critic, actor })
    }

    pub fn save(&self, ck: &mut Checkpoint, p: &str) {
        self.actor.save(ck, &format!("{p}actor."));
        self.critic.save(ck, &format!("{p}critic."));
        ck.put_u64(&format!("{p}updates"), self.updates);
    }

    pub fn load(&mut self, ck: &Checkpoint, p: &str) -> Result<()> {
        self.actor.load(ck, &format!("{p}actor."))?;
        self.critic.load(ck, &format!("{p}critic."))?;
        self.updates = ck.u64(&format!("{p}updates"))?;
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn fixture(b: usize, layer_norm: bool, seed: u64) -> (Td3Agent, SampleBatch) {
        let nets = Td3Nets::new(&EnvSpec::pendulum(), &[7, 6], layer_norm).unwrap();
        let mut agent = Td3Agent::new(nets, RngKey::from_seed(seed));
        let mut rng = RngKey::from_seed(seed).fold_in(7).rng();
        let mut g = |n: usize, s: f64| -> Vec<f64> { (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect() };
        // perturb the targets so they differ from the online nets
        for v in agent.critic.q1_target.iter_mut().chain(agent.critic.q2_target.iter_mut()) {
            *v += 0.05;
        }
        let batch = SampleBatch {
            obs: Matrix::from_vec(b, 3, g(b * 3, 1.0)).unwrap(),
            actions: Matrix::from_vec(b, 1, g(b, 1.0)).unwrap(),
            rewards: g(b, 1.0),
            terminated: (0..b).map(|i| i % 3 == 0).collect(),
            truncated: vec![false; b],
            next_obs: Matrix::from_vec(b, 3, g(b * 3, 1.0)).unwrap(),
            log_probs: None,
            values: None,
        };
        (agent, batch)
    }

    pub(crate) fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let den = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
        if den < 1e-12 { num } else { num / den }
    }

    fn central(f: impl Fn(&[f64]) -> f64, p: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        let mut q = p.to_vec();
        (0..p.len())
            .map(|i| {
                let x = q[i];
                q[i] = x + h;
                let up = f(&q);
                q[i] = x - h;
                let dn = f(&q);
                q[i] = x;
                (up - dn) / (2.0 * h)
            })
            .collect()
    }

    /// Relative errors of the critic (q1, q2) and actor gradients.
    pub(crate) fn fd_check(agent: &Td3Agent, batch: &SampleBatch) -> (f64, f64, f64) {
        let n = &agent.nets;
        let c = &agent.critic;
        let y = n.targets(c, &agent.actor.target, batch, RngKey::from_seed(1), &Td3Config::default()).unwrap();
        let x = batch.obs.hcat(&batch.actions).unwrap();
        let (_, g1, g2) = n.critic_loss_and_grad(&c.q1, &c.q2, &x, &y).unwrap();
        let f1 = central(|q| n.critic_loss_and_grad(q, &c.q2, &x, &y).unwrap().0, &c.q1);
        let f2 = central(|q| n.critic_loss_and_grad(&c.q1, q, &x, &y).unwrap().0, &c.q2);
        let (_, ga) = n.actor_loss_and_grad(&agent.actor.params, &c.q1, &batch.obs).unwrap();
        let fa = central(|a| n.actor_loss_and_grad(a, &c.q1, &batch.obs).unwrap().0, &agent.actor.params);
        (rel_err(&g1, &f1), rel_err(&g2, &f2), rel_err(&ga, &fa))
    }

    #[test]
    fn gradients_match_finite_differences() {
        for (seed, ln) in [(0, false), (1, true)] {
            let (agent, batch) = fixture(8, ln, seed);
            let (e1, e2, ea) = fd_check(&agent, &batch);
            assert!(e1 < 1e-4 && e2 < 1e-4 && ea < 1e-4, "{e1} {e2} {ea}");
        }
    }

    #[test]
    fn zero_discount_target_is_reward() {
        let (agent, batch) = fixture(8, false, 2);
        let cfg = Td3Config { gamma: 0.0, ..Default::default() };
        let y = agent.nets.targets(&agent.critic, &agent.actor.target, &batch, RngKey::from_seed(0), &cfg).unwrap();
        assert_eq!(y, batch.rewards);
    }

    #[test]
    fn full_soft_update_copies() {
        let mut t = vec![1.0, 2.0];
        soft_update(&mut t, &[5.0, -1.0], 1.0);
        assert_eq!(t, vec![5.0, -1.0]);
    }

    #[test]
    fn repeated_soft_updates_follow_closed_form() {
        let init = vec![0.3, -1.2, 4.0];
        let online = vec![1.0, 2.0, -3.0];
        let tau = 0.005;
        let mut t = init.clone();
        for _ in 0..300 {
            soft_update(&mut t, &online, tau);
        }
        let keep = (1.0 - tau).powi(300);
        for i in 0..3 {
            let expect = online[i] * (1.0 - keep) + init[i] * keep;
            assert!((t[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn targets_move_only_on_actor_steps() {
        let (mut agent, batch) = fixture(8, false, 3);
        let cfg = Td3Config::default();
        let before = agent.critic.q1_target.clone();
        agent.update(&batch, RngKey::from_seed(0), &cfg).unwrap();
        assert_eq!(agent.critic.q1_target, before);
        let l = agent.update(&batch, RngKey::from_seed(1), &cfg).unwrap();
        assert!(l.actor.is_some());
        assert_ne!(agent.critic.q1_target, before);
    }
}
