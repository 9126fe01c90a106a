use super::td3::td3_config;
use super::{env_from_config, evaluate, parse_choice, Counters, EvalReport, EvalSettings, Metrics, Workflow, EVAL, INIT, STEP};
use crate::cli::checkpoint::Checkpoint;
use crate::cli::config::Config;
use crate::ec::{argsort_desc, gaussian_mutate, tournament_select, uniform_crossover};
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::exec::{batched_rollout, Executor, Policy, RngKey, RolloutMode, RolloutOptions, RolloutResult};
use crate::net::{init_params, ParamVector};
use crate::rl::{ActMode, MlpPolicy, RandomPolicy, ReplayBuffer, Td3Agent, Td3Config, Td3Nets};

/// How many RL updates follow each iteration's sampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateSchedule {
    /// As many updates as environment steps were sampled.
    Aligned,
    Fixed(u64),
}

impl UpdateSchedule {
    pub(crate) fn from_config(cfg: &Config, mode_key: &str, fixed_key: &str) -> Result<Self> {
        Ok(match parse_choice(cfg, mode_key, &["aligned", "fixed"])? {
            "aligned" => UpdateSchedule::Aligned,
            _ => UpdateSchedule::Fixed(cfg.u64(fixed_key)?),
        })
    }

    pub fn updates(self, sampled: u64) -> u64 {
        match self {
            UpdateSchedule::Aligned => sampled,
            UpdateSchedule::Fixed(n) => n,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaSettings {
    pub elites: usize,
    pub tournament_size: usize,
    pub mutation_std: f64,
    pub mutation_prob: f64,
}

/// Elites first, then offspring of two tournament winners via uniform crossover
/// and Gaussian mutation.
pub fn next_generation(pop: &[ParamVector], fitness: &[f64], ga: &GaSettings, key: RngKey) -> Result<Vec<ParamVector>> {
    let n = pop.len();
    let order = argsort_desc(fitness);
    let mut next: Vec<ParamVector> = order[..ga.elites.min(n)].iter().map(|&i| pop[i].clone()).collect();
    let mut j = 0u64;
    while next.len() < n {
        let k = key.fold_in(j);
        let a = tournament_select(fitness, k.fold_in(0), ga.tournament_size)?;
        let b = tournament_select(fitness, k.fold_in(1), ga.tournament_size)?;
        let child = uniform_crossover(&pop[a], &pop[b], k.fold_in(2))?;
        next.push(gaussian_mutate(&child, k.fold_in(3), ga.mutation_std, ga.mutation_prob));
        j += 1;
    }
    Ok(next)
}

/// Fills `buffer` with `steps` uniformly random transitions from one lane.
pub(crate) fn prefill(
    exec: &Executor,
    env: &EnvSpec,
    steps: usize,
    key: RngKey,
    buffer: &mut ReplayBuffer,
) -> Result<RolloutResult> {
    let r = batched_rollout(
        exec,
        env,
        &[RandomPolicy(env.action_space)],
        1,
        RolloutMode::Steps(steps),
        key,
        RolloutOptions { collect: true },
    )?
    .pop()
    .expect("one agent");
    buffer.add(r.batch.as_ref().expect("collected"))?;
    Ok(r)
}

/// Runs each policy for `episodes` episodes, stores every transition and
/// returns per-agent mean returns with the step and episode totals.
pub(crate) fn rollout_into<P: Policy>(
    exec: &Executor,
    env: &EnvSpec,
    agents: &[P],
    episodes: usize,
    key: RngKey,
    buffer: &mut ReplayBuffer,
) -> Result<(Vec<f64>, u64, u64)> {
    let res = batched_rollout(
        exec,
        env,
        agents,
        episodes,
        RolloutMode::Episodes(episodes),
        key,
        RolloutOptions { collect: true },
    )?;
    let mut steps = 0;
    let mut eps = 0;
    for r in &res {
        buffer.add(r.batch.as_ref().expect("collected"))?;
        steps += r.env_steps;
        eps += r.episode_returns.len() as u64;
    }
    Ok((res.iter().map(|r| r.mean_return()).collect(), steps, eps))
}

/// Genetic population of deterministic actors plus a TD3 learner sharing one replay buffer.
#[derive(Clone, Debug)]
pub struct ErlWorkflow {
    pub env: EnvSpec,
    pub pop: Vec<ParamVector>,
    pub rl: Td3Agent,
    pub cfg: Td3Config,
    pub buffer: ReplayBuffer,
    pub ga: GaSettings,
    pub schedule: UpdateSchedule,
    pub fitness_episodes: usize,
    pub rl_episodes: usize,
    pub warmup_iters: u64,
    pub random_timesteps: usize,
    pub sync_period: u64,
    pub eval: EvalSettings,
    key: RngKey,
    counters: Counters,
}

impl ErlWorkflow {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        let env = env_from_config(cfg)?;
        let key = RngKey::from_seed(cfg.u64("seed")?);
        let nets = Td3Nets::new(&env, &cfg.hidden("erl.hidden")?, cfg.bool("erl.layer_norm"))?;
        let n = cfg.usize("erl.pop_size")?;
        if n < 2 {
            return Err(Error::config("erl.pop_size", "must be at least 2"));
        }
        let elites = cfg.usize("erl.elites")?;
        if elites >= n {
            return Err(Error::config("erl.elites", "must be smaller than the population"));
        }
        let pop = (0..n)
            .map(|j| init_params(&nets.actor, key.fold_in(INIT).fold_in(1).fold_in(j as u64)))
            .collect();
        let fitness_episodes = cfg.usize("erl.fitness_episodes")?.max(1);
        Ok(ErlWorkflow {
            buffer: ReplayBuffer::new(cfg.usize("td3.buffer_size")?, env.obs_dim, env.action_dim())?,
            rl: Td3Agent::new(nets, key.fold_in(INIT).fold_in(0)),
            env,
            pop,
            cfg: td3_config(cfg, "erl.actor_update_interval")?,
            ga: GaSettings {
                elites,
                tournament_size: cfg.usize("erl.tournament_size")?.max(1),
                mutation_std: cfg.f64("erl.mutation_std"),
                mutation_prob: cfg.f64("erl.mutation_prob"),
            },
            schedule: UpdateSchedule::from_config(cfg, "erl.rl_updates", "erl.fixed_updates")?,
            fitness_episodes,
            rl_episodes: cfg.usize("erl.rl_episodes")?,
            warmup_iters: cfg.u64("erl.warmup_iters")?,
            random_timesteps: cfg.usize("erl.random_timesteps")?,
            sync_period: cfg.u64("erl.sync_period")?,
            eval: EvalSettings::from_config(cfg)?,
            key,
            counters: Counters::default(),
        })
    }
}

impl Workflow for ErlWorkflow {
    fn id(&self) -> &'static str {
        "erl"
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
        let nets = &self.rl.nets;
        let members: Vec<MlpPolicy> = self
            .pop
            .iter()
            .map(|p| MlpPolicy::new(&nets.actor, p, self.env.action_space, ActMode::Deterministic))
            .collect();
        let (fitness, mut sampled, mut episodes) =
            rollout_into(exec, &self.env, &members, self.fitness_episodes, k.fold_in(0), &mut self.buffer)?;
        if self.rl_episodes > 0 {
            let explore = MlpPolicy::new(
                &nets.actor,
                &self.rl.actor.params,
                self.env.action_space,
                ActMode::Explore { std: self.cfg.exploration_noise },
            );
            let (ret, s, e) = rollout_into(exec, &self.env, &[explore], self.rl_episodes, k.fold_in(1), &mut self.buffer)?;
            sampled += s;
            episodes += e;
            m.push("rl/episode_return", ret[0]);
        }
        self.pop = next_generation(&self.pop, &fitness, &self.ga, k.fold_in(2))?;
        let learning = i >= self.warmup_iters;
        if learning {
            let updates = self.schedule.updates(sampled);
            let (mut critic, mut actor, mut actor_steps) = (0.0, 0.0, 0);
            for u in 0..updates {
                let batch = self.buffer.sample(k.fold_in(3).fold_in(u), self.cfg.batch_size)?;
                let l = self.rl.update(&batch, k.fold_in(4).fold_in(u), &self.cfg)?;
                critic += l.critic;
                if let Some(a) = l.actor {
                    actor += a;
                    actor_steps += 1;
                }
            }
            self.counters.rl_updates += updates;
            if updates > 0 {
                m.push("loss/critic", critic / updates as f64);
            }
            if actor_steps > 0 {
                m.push("loss/actor", actor / actor_steps as f64);
            }
            if self.sync_period > 0 && (i + 1) % self.sync_period == 0 {
                let last = self.pop.len() - 1;
                self.pop[last] = self.rl.actor.params.clone();
            }
        }
        self.counters.iteration += 1;
        self.counters.env_steps += sampled;
        self.counters.episodes += episodes;
        let n = fitness.len() as f64;
        m.push("train/fitness_mean", fitness.iter().sum::<f64>() / n);
        m.push("train/fitness_max", fitness.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        m.push("buffer/size", self.buffer.len() as f64);
        Ok(m)
    }

    /// Evaluates the current elite, `pop[0]`.
    fn evaluate(&self, exec: &Executor) -> Result<EvalReport> {
        let p = MlpPolicy::new(&self.rl.nets.actor, &self.pop[0], self.env.action_space, ActMode::Deterministic);
        let key = self.key.fold_in(EVAL).fold_in(self.counters.iteration);
        evaluate(exec, &self.env, &[p], self.eval.episodes, self.eval.num_envs, key)
    }

    fn save(&self, ck: &mut Checkpoint) {
        self.counters.save(ck);
        let flat: Vec<f64> = self.pop.iter().flat_map(|p| p.iter().copied()).collect();
        ck.put_f64s("pop", &flat);
        self.rl.save(ck, "rl.");
        self.buffer.save(ck, "buffer.");
    }

    fn load(&mut self, ck: &Checkpoint) -> Result<()> {
        let d = self.rl.nets.actor.param_count();
        let flat = ck.f64s_len("pop", d * self.pop.len())?;
        self.counters = Counters::load(ck)?;
        self.pop = flat.chunks(d).map(|c| ParamVector(c.to_vec())).collect();
        self.rl.load(ck, "rl.")?;
        self.buffer.load(ck, "buffer.")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(extra: &[&str]) -> ErlWorkflow {
        let mut c = Config::default();
        for kv in ["workflow=erl", "erl.hidden=6", "erl.pop_size=4", "env.max_episode_steps=20", "td3.batch_size=8", "erl.warmup_iters=1"] {
            c.set(kv).unwrap();
        }
        for kv in extra {
            c.set(kv).unwrap();
        }
        ErlWorkflow::from_config(&c).unwrap()
    }

    #[test]
    fn elites_survive_and_offspring_fill_the_rest() {
        let pop: Vec<ParamVector> = (0..5).map(|i| ParamVector(vec![i as f64; 3])).collect();
        let fitness = [0.0, 4.0, 1.0, 3.0, 2.0];
        let ga = GaSettings {
            elites: 2,
            tournament_size: 3,
            mutation_std: 0.0,
            mutation_prob: 0.0,
        };
        let next = next_generation(&pop, &fitness, &ga, RngKey::from_seed(1)).unwrap();
        assert_eq!(next.len(), 5);
        assert_eq!(next[0].0, vec![1.0; 3]);
        assert_eq!(next[1].0, vec![3.0; 3]);
        // without mutation every gene comes from some parent
        for c in &next[2..] {
            assert!(c.iter().all(|&g| g.fract() == 0.0 && (0.0..5.0).contains(&g)));
        }
    }

    #[test]
    fn aligned_updates_match_sampled_steps() {
        let exec = Executor::sequential();
        let mut w = small(&[]);
        w.step(&exec).unwrap();
        assert_eq!(w.counters().rl_updates, 0);
        let before = w.counters().env_steps;
        w.step(&exec).unwrap();
        let c = w.counters();
        assert_eq!(c.env_steps - before, 5 * 20);
        assert_eq!(c.rl_updates, 5 * 20);
        assert_eq!(w.pop[3], w.rl.actor.params);
        let mut f = small(&["erl.rl_updates=fixed", "erl.fixed_updates=7"]);
        f.step(&exec).unwrap();
        f.step(&exec).unwrap();
        assert_eq!(f.counters().rl_updates, 7);
    }

    #[test]
    fn resume_continues_identically() {
        let exec = Executor::sequential();
        let mut a = small(&[]);
        a.step(&exec).unwrap();
        a.step(&exec).unwrap();
        let mut ck = Checkpoint::new("erl");
        a.save(&mut ck);
        let mut b = small(&[]);
        b.load(&ck).unwrap();
        assert_eq!(a.step(&exec).unwrap(), b.step(&exec).unwrap());
        assert_eq!(a.pop, b.pop);
        assert_eq!(a.rl, b.rl);
    }
}
