use super::{
    env_from_config, evaluate, init_norm, load_lanes, obs_norm_mode, save_lanes, Counters, EvalReport, EvalSettings,
    Metrics, Workflow, EVAL, INIT, STEP,
};
use crate::cli::checkpoint::Checkpoint;
use crate::cli::config::Config;
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::exec::{rollout_lanes, Executor, Lanes, RngKey, RolloutOptions};
use crate::rl::{build_batch, ppo_update, ActMode, MlpPolicy, ObsNorm, ObsNormMode, PpoAgent, PpoConfig};

/// On-policy PPO over persistent environment lanes.
#[derive(Clone, Debug)]
pub struct PpoWorkflow {
    pub env: EnvSpec,
    pub agent: PpoAgent,
    /// Loss weights and hyperparameters; PBT edits these between steps.
    pub cfg: PpoConfig,
    pub norm: ObsNorm,
    pub lanes: Lanes,
    pub rollout_len: usize,
    pub eval: EvalSettings,
    key: RngKey,
    counters: Counters,
}

impl PpoWorkflow {
    pub fn new(
        env: EnvSpec,
        agent: PpoAgent,
        cfg: PpoConfig,
        norm: ObsNorm,
        num_envs: usize,
        rollout_len: usize,
        eval: EvalSettings,
        key: RngKey,
    ) -> Result<Self> {
        if num_envs == 0 || rollout_len == 0 {
            return Err(Error::invalid("PPO needs at least one lane and one step per iteration"));
        }
        let lanes = Lanes::new(&env, num_envs, key.fold_in(INIT).fold_in(1));
        Ok(PpoWorkflow {
            env,
            agent,
            cfg,
            norm,
            lanes,
            rollout_len,
            eval,
            key,
            counters: Counters::default(),
        })
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        Self::with_key(cfg, RngKey::from_seed(cfg.u64("seed")?))
    }

    /// Like [`PpoWorkflow::from_config`] but rooted at `key` instead of the seed.
    pub fn with_key(cfg: &Config, key: RngKey) -> Result<Self> {
        let env = env_from_config(cfg)?;
        let agent = PpoAgent::new(
            &env,
            &cfg.hidden("ppo.hidden")?,
            cfg.bool("ppo.layer_norm"),
            key.fold_in(INIT).fold_in(0),
        )?;
        let mode = obs_norm_mode(cfg, "ppo.obs_norm")?;
        let norm = init_norm(&env, mode, cfg.usize("obs_norm.vbn_steps")?, key.fold_in(INIT).fold_in(2))?;
        Self::new(
            env,
            agent,
            ppo_config(cfg)?,
            norm,
            cfg.usize("ppo.num_envs")?,
            cfg.usize("ppo.rollout_len")?,
            EvalSettings::from_config(cfg)?,
            key,
        )
    }

    /// Replaces the root key; later iterations draw from the new stream.
    pub fn set_key(&mut self, key: RngKey) {
        self.key = key;
    }
}

pub(crate) fn ppo_config(cfg: &Config) -> Result<PpoConfig> {
    let c = PpoConfig {
        actor_loss_weight: cfg.f64("ppo.actor_loss_weight"),
        critic_loss_weight: cfg.f64("ppo.critic_loss_weight"),
        entropy_weight: cfg.f64("ppo.entropy_weight"),
        gamma: cfg.f64("ppo.gamma"),
        gae_lambda: cfg.f64("ppo.gae_lambda"),
        clip_eps: cfg.positive("ppo.clip_eps")?,
        lr: cfg.positive("ppo.lr")?,
        max_grad_norm: cfg.positive("ppo.max_grad_norm")?,
        epochs: cfg.usize("ppo.epochs")?,
        minibatch_size: cfg.usize("ppo.minibatch_size")?,
        normalize_advantages: cfg.bool("ppo.normalize_advantages"),
    };
    if !(0.0..=1.0).contains(&c.gamma) || !(0.0..=1.0).contains(&c.gae_lambda) {
        return Err(Error::config("ppo.gamma", "gamma and gae_lambda must lie in [0, 1]"));
    }
    if c.minibatch_size == 0 {
        return Err(Error::config("ppo.minibatch_size", "must be positive"));
    }
    Ok(c)
}

impl Workflow for PpoWorkflow {
    fn id(&self) -> &'static str {
        "ppo"
    }

    fn counters(&self) -> Counters {
        self.counters
    }

    fn step(&mut self, exec: &Executor) -> Result<Metrics> {
        let k = self.key.fold_in(STEP).fold_in(self.counters.iteration);
        let policy = MlpPolicy::new(&self.agent.actor_spec, &self.agent.actor, self.env.action_space, ActMode::Sample)
            .with_norm(Some(&self.norm));
        let res = rollout_lanes(
            exec,
            &self.env,
            &policy,
            &mut self.lanes,
            self.rollout_len,
            k.fold_in(0),
            RolloutOptions { collect: true },
        )?;
        let samples = res.batch.as_ref().expect("collected");
        let batch = build_batch(&self.agent, samples, self.lanes.len(), Some(&self.norm), &self.cfg)?;
        let losses = ppo_update(&mut self.agent, &batch, &self.cfg, k.fold_in(1))?;
        if self.norm.mode == ObsNormMode::RunningStats {
            self.norm.update(&samples.obs);
        }
        let n = samples.len();
        self.counters.iteration += 1;
        self.counters.env_steps += n as u64;
        self.counters.episodes += res.episode_returns.len() as u64;
        self.counters.rl_updates += (self.cfg.epochs * n.div_ceil(self.cfg.minibatch_size)) as u64;
        let mut m = Metrics::default();
        if !res.episode_returns.is_empty() {
            m.push("train/episode_return_mean", res.mean_return());
        }
        m.push("loss/total", losses.total);
        m.push("loss/actor", losses.actor);
        m.push("loss/critic", losses.critic);
        m.push("loss/entropy", losses.entropy);
        m.push("ppo/approx_kl", losses.approx_kl);
        m.push("ppo/clip_fraction", losses.clip_fraction);
        Ok(m)
    }

    fn evaluate(&self, exec: &Executor) -> Result<EvalReport> {
        let p = MlpPolicy::new(&self.agent.actor_spec, &self.agent.actor, self.env.action_space, ActMode::Deterministic)
            .with_norm(Some(&self.norm));
        let key = self.key.fold_in(EVAL).fold_in(self.counters.iteration);
        evaluate(exec, &self.env, &[p], self.eval.episodes, self.eval.num_envs, key)
    }

    fn save(&self, ck: &mut Checkpoint) {
        self.counters.save(ck);
        self.agent.save(ck, "agent.");
        self.norm.save(ck, "norm.");
        save_lanes(ck, "lanes.", &self.lanes);
    }

    fn load(&mut self, ck: &Checkpoint) -> Result<()> {
        self.counters = Counters::load(ck)?;
        self.agent.load(ck, "agent.")?;
        self.norm.load(ck, "norm.")?;
        load_lanes(ck, "lanes.", &mut self.lanes)
    }
}
