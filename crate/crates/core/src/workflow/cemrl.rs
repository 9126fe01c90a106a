use rand::seq::index::sample;

use super::erl::{prefill, rollout_into, UpdateSchedule};
use super::td3::td3_config;
use super::{env_from_config, evaluate, Counters, EvalReport, EvalSettings, Metrics, Workflow, EVAL, INIT, STEP};
use crate::cli::checkpoint::Checkpoint;
use crate::cli::config::Config;
use crate::ec::{CemConfig, CemState};
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::exec::{Executor, RngKey};
use crate::net::init_params;
use crate::rl::{soft_update, ActMode, Actor, MlpPolicy, ReplayBuffer, Td3Config, Td3Nets, TwinCritic};

/// Diagonal CEM over actor parameters where half the candidates take TD3 actor
/// steps against one shared twin critic before evaluation.
#[derive(Clone, Debug)]
pub struct CemRlWorkflow {
    pub env: EnvSpec,
    pub nets: Td3Nets,
    pub cem: CemState,
    pub critic: TwinCritic,
    pub cfg: Td3Config,
    pub buffer: ReplayBuffer,
    pub num_rl_agents: usize,
    pub schedule: UpdateSchedule,
    pub fitness_episodes: usize,
    pub warmup_iters: u64,
    pub random_timesteps: usize,
    pub eval: EvalSettings,
    /// Environment steps sampled by the previous iteration's evaluations.
    pub prev_timesteps: u64,
    critic_steps: u64,
    key: RngKey,
    counters: Counters,
}

impl CemRlWorkflow {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let env = env_from_config(cfg)?;
        let key = RngKey::from_seed(cfg.u64("seed")?);
        let nets = Td3Nets::new(&env, &cfg.hidden("cemrl.hidden")?, cfg.bool("cemrl.layer_norm"))?;
        let pop_size = cfg.usize("cemrl.pop_size")?;
        let num_rl_agents = cfg.usize("cemrl.num_rl_agents")?;
        if num_rl_agents > pop_size {
            return Err(Error::config("cemrl.num_rl_agents", "cannot exceed the population size"));
        }
        let cem = CemState::new(
            init_params(&nets.actor, key.fold_in(INIT).fold_in(0)),
            CemConfig {
                pop_size,
                num_elites: cfg.usize("cemrl.num_elites")?,
                init_var: cfg.positive("cemrl.init_var")?,
                noise_start: cfg.positive("cemrl.noise_start")?,
                noise_end: cfg.positive("cemrl.noise_end")?,
                planned_iterations: cfg.u64("cemrl.noise_decay_iters")?,
            },
        )?;
        Ok(CemRlWorkflow {
            buffer: ReplayBuffer::new(cfg.usize("td3.buffer_size")?, env.obs_dim, env.action_dim())?,
            critic: TwinCritic::new(&nets.critic, key.fold_in(INIT).fold_in(1)),
            env,
            nets,
            cem,
            cfg: td3_config(cfg, "cemrl.actor_update_interval")?,
            num_rl_agents,
            schedule: UpdateSchedule::from_config(cfg, "cemrl.rl_updates", "cemrl.fixed_updates")?,
            fitness_episodes: cfg.usize("cemrl.fitness_episodes")?.max(1),
            warmup_iters: cfg.u64("cemrl.warmup_iters")?,
            random_timesteps: cfg.usize("cemrl.random_timesteps")?,
            eval: EvalSettings::from_config(cfg)?,
            prev_timesteps: 0,
            critic_steps: 0,
            key,
            counters: Counters::default(),
        })
    }

    /// `updates` rounds of one critic step (targets from actor `u % m`) followed,
    /// on actor rounds, by one step of every actor and soft target updates.
    fn train(&mut self, actors: &mut [Actor], updates: u64, key: RngKey) -> Result<(f64, f64)> {
        let m = actors.len() as u64;
        let (mut critic_loss, mut actor_loss, mut actor_rounds) = (0.0, 0.0, 0u64);
        for u in 0..updates {
            let batch = self.buffer.sample(key.fold_in(u).fold_in(0), self.cfg.batch_size)?;
            let j = (u % m) as usize;
            let y = self
                .nets
                .targets(&self.critic, &actors[j].target, &batch, key.fold_in(u).fold_in(1), &self.cfg)?;
            critic_loss += self.nets.critic_step(&mut self.critic, &batch, &y, &self.cfg)?;
            self.critic_steps += 1;
            if self.critic_steps % self.cfg.actor_update_interval == 0 {
                for a in actors.iter_mut() {
                    actor_loss += self.nets.actor_step(a, &self.critic, &batch.obs, &self.cfg)?;
                    soft_update(&mut a.target, &a.params, self.cfg.tau);
                }
                self.critic.soft_update(self.cfg.tau);
                actor_rounds += 1;
            }
        }
        Ok((
            critic_loss / updates.max(1) as f64,
            actor_loss / (actor_rounds * m).max(1) as f64,
        ))
    }
}

impl Workflow for CemRlWorkflow {
    fn id(&self) -> &'static str {
        "cemrl"
    }

    fn counters(&self) -> Counters {
        self.counters
    }

    fn step(&mut self, exec: &Executor) -> Result<Metrics> {
        let i = self.counters.iteration;
        let k = self.key.fold_in(STEP).fold_in(i);
        let mut m = Metrics::default();
        if i == 0 && self.random_timesteps > 0 {
            let r = prefill(exec, &self.env, self.random_timesteps, k.fold_in(9), &mut self.buffer)?;
            self.counters.env_steps += r.env_steps;
            self.counters.episodes += r.episode_returns.len() as u64;
        }
        let n = self.cem.cfg.pop_size;
        let mut cands = self.cem.ask(k.fold_in(0), n)?;
        let updates = self.schedule.updates(self.prev_timesteps);
        if i >= self.warmup_iters && self.num_rl_agents > 0 && updates > 0 {
            let chosen = sample(&mut k.fold_in(1).rng(), n, self.num_rl_agents).into_vec();
            let mut actors: Vec<Actor> = chosen.iter().map(|&c| Actor::new(cands.params[c].clone())).collect();
            let (lc, la) = self.train(&mut actors, updates, k.fold_in(2))?;
            for (&c, a) in chosen.iter().zip(actors) {
                cands.params[c] = a.params;
            }
            self.counters.rl_updates += updates;
            m.push("loss/critic", lc);
            m.push("loss/actor", la);
        }
        let members: Vec<MlpPolicy> = cands
            .params
            .iter()
            .map(|p| MlpPolicy::new(&self.nets.actor, p, self.env.action_space, ActMode::Deterministic))
            .collect();
        let (fitness, sampled, episodes) =
            rollout_into(exec, &self.env, &members, self.fitness_episodes, k.fold_in(3), &mut self.buffer)?;
        drop(members);
        self.cem.tell(&cands, &fitness)?;
        self.prev_timesteps = sampled;
        self.counters.iteration += 1;
        self.counters.env_steps += sampled;
        self.counters.episodes += episodes;
        m.push("train/fitness_mean", fitness.iter().sum::<f64>() / n as f64);
        m.push("train/fitness_max", fitness.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        m.push("cem/noise_floor", self.cem.noise_floor(self.cem.iteration));
        m.push("buffer/size", self.buffer.len() as f64);
        Ok(m)
    }

    /// Evaluates the distribution mean.
    fn evaluate(&self, exec: &Executor) -> Result<EvalReport> {
        let p = MlpPolicy::new(&self.nets.actor, &self.cem.mean, self.env.action_space, ActMode::Deterministic);
        let key = self.key.fold_in(EVAL).fold_in(self.counters.iteration);
        evaluate(exec, &self.env, &[p], self.eval.episodes, self.eval.num_envs, key)
    }

    fn save(&self, ck: &mut Checkpoint) {
        self.counters.save(ck);
        self.cem.save(ck, "cem.");
        self.critic.save(ck, "critic.");
        self.buffer.save(ck, "buffer.");
        ck.put_u64s("steps", &[self.prev_timesteps, self.critic_steps]);
    }

    fn load(&mut self, ck: &Checkpoint) -> Result<()> {
        self.counters = Counters::load(ck)?;
        self.cem.load(ck, "cem.")?;
        self.critic.load(ck, "critic.")?;
        self.buffer.load(ck, "buffer.")?;
        match ck.u64s("steps")? {
            &[p, c] => {
                self.prev_timesteps = p;
                self.critic_steps = c;
                Ok(())
            }
            _ => Err(Error::Checkpoint("steps segment has the wrong length".into())),
        }
    }
}
