use super::{
    env_from_config, evaluate, init_norm, obs_norm_mode, parse_choice, Counters, EvalReport, EvalSettings, Metrics,
    Workflow, EVAL, INIT, STEP,
};
use crate::cli::checkpoint::Checkpoint;
use crate::cli::config::Config;
use crate::ec::{ArsConfig, ArsState, CmaConfig, CmaState, EcState, OpenEsConfig, OpenEsState, VesConfig, VesState};
use crate::env::{ActionSpace, EnvSpec};
use crate::error::{Error, Result};
use crate::exec::{batched_rollout, Executor, RngKey, RolloutMode, RolloutOptions};
use crate::net::{init_params, Head, Matrix, MlpSpec, ParamVector};
use crate::rl::{ActMode, MlpPolicy, ObsNorm, ObsNormMode};

/// Pure evolutionary policy search: ask, evaluate fitness, tell.
#[derive(Clone, Debug)]
pub struct EsWorkflow {
    pub env: EnvSpec,
    pub spec: MlpSpec,
    pub ec: EcState,
    pub norm: ObsNorm,
    pub pop_size: usize,
    pub fitness_episodes: usize,
    pub eval: EvalSettings,
    key: RngKey,
    counters: Counters,
}

/// Deterministic policy network for `env`: scaled tanh for continuous actions,
/// argmax over outputs for discrete ones.
pub(crate) fn policy_spec(env: &EnvSpec, hidden: &[usize], layer_norm: bool) -> Result<MlpSpec> {
    let spec = match env.action_space {
        ActionSpace::Continuous { high, dim, .. } => {
            MlpSpec::new(env.obs_dim, hidden, dim, Head::DeterministicTanh { scale: high })?
        }
        ActionSpace::Discrete(k) => MlpSpec::new(env.obs_dim, hidden, k, Head::Linear)?,
    };
    Ok(spec.with_layer_norm(layer_norm))
}

impl EsWorkflow {
    pub fn new(env: EnvSpec, spec: MlpSpec, ec: EcState, norm: ObsNorm, fitness_episodes: usize, eval: EvalSettings, key: RngKey) -> Result<Self> {
        if fitness_episodes == 0 {
            return Err(Error::config("es.fitness_episodes", "must be positive"));
        }
        let pop_size = match &ec {
            EcState::OpenEs(s) => s.cfg.pop_size,
            EcState::Ars(s) => s.cfg.pop_size,
            EcState::Ves(s) => s.cfg.pop_size,
            EcState::Cma(s) => s.cfg.pop_size,
            EcState::Cem(s) => s.cfg.pop_size,
        };
        Ok(EsWorkflow {
            env,
            spec,
            ec,
            norm,
            pop_size,
            fitness_episodes,
            eval,
            key,
            counters: Counters::default(),
        })
    }

    pub fn from_config(cfg: &Config) -> Result<Self> {
        let env = env_from_config(cfg)?;
        let spec = policy_spec(&env, &cfg.hidden("es.hidden")?, cfg.bool("es.layer_norm"))?;
        let key = RngKey::from_seed(cfg.u64("seed")?);
        let mean = init_params(&spec, key.fold_in(INIT).fold_in(0));
        let n = cfg.usize("es.pop_size")?;
        let algo = parse_choice(cfg, "es.algo", &["openes", "ars", "ves", "cmaes"])?;
        let ec = match algo {
            "openes" => {
                let table = cfg.usize("openes.noise_table_size")?;
                EcState::OpenEs(OpenEsState::new(
                    mean,
                    OpenEsConfig {
                        pop_size: n,
                        sigma: cfg.positive("openes.sigma")?,
                        lr: cfg.positive("openes.lr")?,
                        weight_decay: cfg.f64("openes.weight_decay"),
                        mirrored: cfg.bool("openes.mirrored"),
                        noise_table: (table > 0).then_some(table),
                    },
                    key.fold_in(INIT).fold_in(1).low64(),
                )?)
            }
            "ars" => EcState::Ars(ArsState::new(
                mean,
                ArsConfig {
                    pop_size: n,
                    num_elites: cfg.usize("ars.num_elites")?,
                    sigma: cfg.positive("ars.sigma")?,
                    lr: cfg.positive("ars.lr")?,
                },
            )?),
            "ves" => EcState::Ves(VesState::new(
                mean,
                VesConfig {
                    pop_size: n,
                    num_elites: cfg.usize("ves.num_elites")?,
                    sigma: cfg.positive("ves.sigma")?,
                    mirrored: cfg.bool("ves.mirrored"),
                },
            )?),
            _ => EcState::Cma(CmaState::new(
                mean,
                CmaConfig {
                    pop_size: n,
                    num_elites: cfg.usize("cmaes.num_elites")?,
                    sigma: cfg.positive("cmaes.sigma")?,
                    max_dim: cfg.usize("cmaes.max_dim")?,
                },
            )?),
        };
        let mode = obs_norm_mode(cfg, "es.obs_norm")?;
        let norm = init_norm(&env, mode, cfg.usize("obs_norm.vbn_steps")?, key.fold_in(INIT).fold_in(2))?;
        Self::new(env, spec, ec, norm, cfg.usize("es.fitness_episodes")?, EvalSettings::from_config(cfg)?, key)
    }

    /// Mean return of each candidate over `fitness_episodes` episodes, plus the
    /// observations visited when running statistics are being tracked.
    pub fn fitness(
        &self,
        exec: &Executor,
        params: &[ParamVector],
        key: RngKey,
    ) -> Result<(Vec<f64>, u64, u64, Option<Matrix>)> {
        let policies: Vec<MlpPolicy> = params
            .iter()
            .map(|p| {
                MlpPolicy::new(&self.spec, p, self.env.action_space, ActMode::Deterministic).with_norm(Some(&self.norm))
            })
            .collect();
        let collect = self.norm.mode == ObsNormMode::RunningStats;
        let res = batched_rollout(
            exec,
            &self.env,
            &policies,
            self.fitness_episodes,
            RolloutMode::Episodes(self.fitness_episodes),
            key,
            RolloutOptions { collect },
        )?;
        let fitness = res.iter().map(|r| r.mean_return()).collect();
        let steps = res.iter().map(|r| r.env_steps).sum();
        let episodes = res.iter().map(|r| r.episode_returns.len() as u64).sum();
        let obs = if collect {
            let mut all = Vec::new();
            let mut rows = 0;
            for r in &res {
                let b = r.batch.as_ref().expect("collected");
                all.extend_from_slice(b.obs.as_slice());
                rows += b.obs.rows();
            }
            Some(Matrix::from_vec(rows, self.env.obs_dim, all)?)
        } else {
            None
        };
        Ok((fitness, steps, episodes, obs))
    }
}

impl Workflow for EsWorkflow {
    fn id(&self) -> &'static str {
        "es"
    }

    fn counters(&self) -> Counters {
        self.counters
    }

    fn step(&mut self, exec: &Executor) -> Result<Metrics> {
        let k = self.key.fold_in(STEP).fold_in(self.counters.iteration);
        let cands = self.ec.ask(k.fold_in(0), self.pop_size)?;
        let (fitness, steps, episodes, obs) = self.fitness(exec, &cands.params, k.fold_in(1))?;
        let report = self.ec.tell(&cands, &fitness)?;
        if let Some(o) = obs {
            self.norm.update(&o);
        }
        self.counters.iteration += 1;
        self.counters.env_steps += steps;
        self.counters.episodes += episodes;
        let n = fitness.len() as f64;
        let mut m = Metrics::default();
        m.push("train/fitness_mean", fitness.iter().sum::<f64>() / n);
        m.push("train/fitness_max", fitness.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        m.push("train/fitness_min", fitness.iter().cloned().fold(f64::INFINITY, f64::min));
        m.push("ec/sigma", self.ec.sigma());
        m.push("ec/degenerate", f64::from(u8::from(report.degenerate)));
        if report.reconditioned {
            m.push("ec/reconditioned", 1.0);
        }
        Ok(m)
    }

    fn evaluate(&self, exec: &Executor) -> Result<EvalReport> {
        let mean = self.ec.mean();
        let p = MlpPolicy::new(&self.spec, mean, self.env.action_space, ActMode::Deterministic).with_norm(Some(&self.norm));
        let key = self.key.fold_in(EVAL).fold_in(self.counters.iteration);
        evaluate(exec, &self.env, &[p], self.eval.episodes, self.eval.num_envs, key)
    }

    fn save(&self, ck: &mut Checkpoint) {
        self.counters.save(ck);
        self.ec.save(ck, "ec.");
        self.norm.save(ck, "norm.");
    }

    fn load(&mut self, ck: &Checkpoint) -> Result<()> {
        self.counters = Counters::load(ck)?;
        self.ec.load(ck, "ec.")?;
        self.norm.load(ck, "norm.")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(algo: &str) -> EsWorkflow {
        let mut c = Config::default();
        for kv in [
            format!("es.algo={algo}"),
            "es.pop_size=8".into(),
            "ars.num_elites=2".into(),
            "ves.num_elites=2".into(),
            "cmaes.num_elites=4".into(),
            "es.hidden=4".into(),
            "obs_norm.vbn_steps=500".into(),
            "env.max_episode_steps=30".into(),
            "es.fitness_episodes=2".into(),
        ] {
            c.set(&kv).unwrap();
        }
        EsWorkflow::from_config(&c).unwrap()
    }

    fn sequential_episode(w: &EsWorkflow, params: &[f64], lane: RngKey) -> f64 {
        use crate::env::{env_reset, step_into};
        use crate::exec::Policy;
        let pol = MlpPolicy::new(&w.spec, params, w.env.action_space, ActMode::Deterministic).with_norm(Some(&w.norm));
        let (mut s, o) = env_reset(&w.env, lane.fold_in(0));
        let mut obs = Matrix::from_vec(1, w.env.obs_dim, o).unwrap();
        let mut ret = 0.0;
        loop {
            let a = pol.act(&obs, &[RngKey::from_seed(0)]).unwrap().actions;
            let t = step_into(&w.env, &s, a.row(0), obs.as_mut_slice()).unwrap();
            ret += t.reward;
            if t.terminated || t.truncated {
                return ret;
            }
            s = t.state;
        }
    }

    #[test]
    fn batched_fitness_equals_sequential_loop() {
        let w = small("openes");
        let key = RngKey::from_seed(4);
        let cands = w.ec.ask(key, 8).unwrap();
        let (batched, steps, episodes, _) = w.fitness(&Executor::sequential(), &cands.params, key).unwrap();
        assert_eq!(episodes, 16);
        assert!(steps > 0);
        let again = w.fitness(&Executor::new(3).unwrap(), &cands.params, key).unwrap().0;
        assert_eq!(batched, again);
        for (i, p) in cands.params.iter().enumerate() {
            let agent = key.fold_in(i as u64);
            let expect = (sequential_episode(&w, p, agent.fold_in(0)) + sequential_episode(&w, p, agent.fold_in(1))) / 2.0;
            assert!((batched[i] - expect).abs() < 1e-9, "{i}: {} vs {expect}", batched[i]);
        }
    }

    #[test]
    fn every_algorithm_steps_and_resumes() {
        for algo in ["openes", "ars", "ves", "cmaes"] {
            let exec = Executor::sequential();
            let mut a = small(algo);
            a.step(&exec).unwrap();
            let mut ck = Checkpoint::new("es");
            a.save(&mut ck);
            let mut b = small(algo);
            b.load(&ck).unwrap();
            let ma = a.step(&exec).unwrap();
            let mb = b.step(&exec).unwrap();
            assert_eq!(ma, mb, "{algo}");
            assert_eq!(a.ec, b.ec);
        }
    }

    #[test]
    fn running_stats_track_fitness_observations() {
        let mut c = Config::default();
        c.set("es.algo=ars").unwrap();
        c.set("es.obs_norm=rs").unwrap();
        c.set("es.pop_size=8").unwrap();
        c.set("ars.num_elites=2").unwrap();
        c.set("es.fitness_episodes=1").unwrap();
        c.set("es.hidden=4").unwrap();
        c.set("env.max_episode_steps=20").unwrap();
        let mut w = EsWorkflow::from_config(&c).unwrap();
        w.step(&Executor::sequential()).unwrap();
        assert_eq!(w.norm.count, (8 * 20) as f64);
    }
}
