use super::{
    env_from_config, evaluate, load_lanes, save_lanes, Counters, EvalReport, EvalSettings, Metrics, Workflow, EVAL,
    INIT, STEP,
};
use crate::cli::checkpoint::Checkpoint;
use crate::cli::config::Config;
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::exec::{rollout_lanes, Executor, Lanes, Policy, RngKey, RolloutOptions, RolloutResult};
use crate::rl::{ActMode, MlpPolicy, RandomPolicy, ReplayBuffer, Td3Agent, Td3Config, Td3Nets};

/// Off-policy TD3 with uniform-random warm-up steps.
#[derive(Clone, Debug)]
pub struct Td3Workflow {
    pub env: EnvSpec,
    pub agent: Td3Agent,
    pub cfg: Td3Config,
    pub buffer: ReplayBuffer,
    pub lanes: Lanes,
    pub rollout_steps: usize,
    pub updates_per_step: usize,
    pub random_timesteps: u64,
    pub eval: EvalSettings,
    key: RngKey,
    counters: Counters,
}

/// TD3 hyperparameters from the `td3.*` keys, with the actor delay read from `interval_key`.
pub(crate) fn td3_config(cfg: &Config, interval_key: &str) -> Result<Td3Config> {
    let c = Td3Config {
        gamma: cfg.f64("td3.gamma"),
        tau: cfg.f64("td3.tau"),
        exploration_noise: cfg.f64("td3.exploration_noise"),
        policy_noise: cfg.f64("td3.policy_noise"),
        noise_clip: cfg.f64("td3.noise_clip"),
        batch_size: cfg.usize("td3.batch_size")?,
        actor_lr: cfg.positive("td3.actor_lr")?,
        critic_lr: cfg.positive("td3.critic_lr")?,
        actor_update_interval: cfg.u64(interval_key)?.max(1),
    };
    if !(0.0..=1.0).contains(&c.tau) || !(0.0..=1.0).contains(&c.gamma) {
        return Err(Error::config("td3.tau", "tau and gamma must lie in [0, 1]"));
    }
    if c.batch_size == 0 {
        return Err(Error::config("td3.batch_size", "must be positive"));
    }
    if c.exploration_noise < 0.0 || c.policy_noise < 0.0 || c.noise_clip < 0.0 {
        return Err(Error::config("td3.exploration_noise", "noise scales must be non-negative"));
    }
    Ok(c)
}

/// Runs `steps` transitions per lane with `policy` and stores them.
pub(crate) fn collect_into(
    exec: &Executor,
    env: &EnvSpec,
    policy: &dyn Policy,
    lanes: &mut Lanes,
    steps: usize,
    key: RngKey,
    buffer: &mut ReplayBuffer,
) -> Result<RolloutResult> {
    let res = rollout_lanes(exec, env, policy, lanes, steps, key, RolloutOptions { collect: true })?;
    buffer.add(res.batch.as_ref().expect("collected"))?;
    Ok(res)
}

impl Td3Workflow {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let env = env_from_config(cfg)?;
        let key = RngKey::from_seed(cfg.u64("seed")?);
        let nets = Td3Nets::new(&env, &cfg.hidden("td3.hidden")?, cfg.bool("td3.layer_norm"))?;
        let agent = Td3Agent::new(nets, key.fold_in(INIT).fold_in(0));
        let num_envs = cfg.usize("td3.num_envs")?;
        let rollout_steps = cfg.usize("td3.rollout_steps")?;
        if num_envs == 0 || rollout_steps == 0 {
            return Err(Error::config("td3.rollout_steps", "lanes and steps per iteration must be positive"));
        }
        Ok(Td3Workflow {
            buffer: ReplayBuffer::new(cfg.usize("td3.buffer_size")?, env.obs_dim, env.action_dim())?,
            lanes: Lanes::new(&env, num_envs, key.fold_in(INIT).fold_in(1)),
            env,
            agent,
            cfg: td3_config(cfg, "td3.actor_update_interval")?,
            rollout_steps,
            updates_per_step: cfg.usize("td3.updates_per_step")?,
            random_timesteps: cfg.u64("td3.random_timesteps")?,
            eval: EvalSettings::from_config(cfg)?,
            key,
            counters: Counters::default(),
        })
    }
}

impl Workflow for Td3Workflow {
    fn id(&self) -> &'static str {
        "td3"
    }

    fn counters(&self) -> Counters {
        self.counters
    }

    fn step(&mut self, exec: &Executor) -> Result<Metrics> {
        let k = self.key.fold_in(STEP).fold_in(self.counters.iteration);
        let warm = self.counters.env_steps < self.random_timesteps;
        let explore = MlpPolicy::new(
            &self.agent.nets.actor,
            &self.agent.actor.params,
            self.env.action_space,
            ActMode::Explore { std: self.cfg.exploration_noise },
        );
        let random = RandomPolicy(self.env.action_space);
        let policy: &dyn Policy = if warm { &random } else { &explore };
        let res = collect_into(
            exec,
            &self.env,
            policy,
            &mut self.lanes,
            self.rollout_steps,
            k.fold_in(0),
            &mut self.buffer,
        )?;
        let n = res.env_steps;
        self.counters.iteration += 1;
        self.counters.env_steps += n;
        self.counters.episodes += res.episode_returns.len() as u64;
        let mut m = Metrics::default();
        if !res.episode_returns.is_empty() {
            m.push("train/episode_return_mean", res.mean_return());
        }
        if !warm {
            let updates = n as usize * self.updates_per_step;
            let (mut critic, mut actor, mut actor_steps) = (0.0, 0.0, 0);
            for u in 0..updates {
                let batch = self.buffer.sample(k.fold_in(1).fold_in(u as u64), self.cfg.batch_size)?;
                let l = self.agent.update(&batch, k.fold_in(2).fold_in(u as u64), &self.cfg)?;
                critic += l.critic;
                if let Some(a) = l.actor {
                    actor += a;
                    actor_steps += 1;
                }
            }
            self.counters.rl_updates += updates as u64;
            if updates > 0 {
                m.push("loss/critic", critic / updates as f64);
            }
            if actor_steps > 0 {
                m.push("loss/actor", actor / actor_steps as f64);
            }
        }
        m.push("buffer/size", self.buffer.len() as f64);
        Ok(m)
    }

    fn evaluate(&self, exec: &Executor) -> Result<EvalReport> {
        let p = MlpPolicy::new(
            &self.agent.nets.actor,
            &self.agent.actor.params,
            self.env.action_space,
            ActMode::Deterministic,
        );
        let key = self.key.fold_in(EVAL).fold_in(self.counters.iteration);
        evaluate(exec, &self.env, &[p], self.eval.episodes, self.eval.num_envs, key)
    }

    fn save(&self, ck: &mut Checkpoint) {
        self.counters.save(ck);
        self.agent.save(ck, "agent.");
        self.buffer.save(ck, "buffer.");
        save_lanes(ck, "lanes.", &self.lanes);
    }

    fn load(&mut self, ck: &Checkpoint) -> Result<()> {
        self.counters = Counters::load(ck)?;
        self.agent.load(ck, "agent.")?;
        self.buffer.load(ck, "buffer.")?;
        load_lanes(ck, "lanes.", &mut self.lanes)
    }
}
