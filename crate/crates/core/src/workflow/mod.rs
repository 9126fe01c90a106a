//! Training pipelines behind one `step()` contract, plus the `learn` driver.
//!
//! A workflow's randomness is a pure function of its root key and iteration
//! counter: iteration `i` draws from `root.fold_in(STEP).fold_in(i)` and the
//! evaluation after it from `root.fold_in(EVAL).fold_in(i)`. Restoring the
//! counters from a checkpoint therefore restores the random stream as well.

mod cemrl;
mod erl;
mod es;
mod learn;
pub mod pbt;
mod ppo;
mod td3;

pub use cemrl::CemRlWorkflow;
pub use erl::ErlWorkflow;
pub use es::EsWorkflow;
pub use learn::{learn, Budget, LearnOptions, Record, RecordKind, RecordSink};
pub use pbt::{PbtWorkflow, SyntheticInner};
pub use ppo::PpoWorkflow;
pub use td3::Td3Workflow;

use crate::cli::checkpoint::Checkpoint;
use crate::cli::config::Config;
use crate::env::{EnvId, EnvSpec, EnvState};
use crate::error::{Error, Result};
use crate::exec::{batched_rollout, Executor, Lanes, Policy, RngKey, RolloutMode, RolloutOptions};
use crate::net::Matrix;
use crate::rl::{ObsNorm, ObsNormMode};

pub(crate) const STEP: u64 = 1;
pub(crate) const EVAL: u64 = 2;
pub(crate) const INIT: u64 = 3;

pub const WORKFLOW_IDS: &[&str] = &["es", "ppo", "td3", "erl", "cemrl", "pbt", "pbt-cso"];

/// Monotone progress counters shared by every workflow.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub iteration: u64,
    pub env_steps: u64,
    pub episodes: u64,
    pub rl_updates: u64,
}

impl Counters {
    pub fn save(&self, ck: &mut Checkpoint) {
        ck.put_u64s(
            "counters",
            &[self.iteration, self.env_steps, self.episodes, self.rl_updates],
        );
    }

    pub fn load(ck: &Checkpoint) -> Result<Self> {
        match ck.u64s("counters")? {
            &[iteration, env_steps, episodes, rl_updates] => Ok(Counters {
                iteration,
                env_steps,
                episodes,
                rl_updates,
            }),
            _ => Err(Error::Checkpoint("counters segment has the wrong length".into())),
        }
    }
}

/// Named scalars reported by one step, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics(pub Vec<(String, f64)>);

impl Metrics {
    pub fn push(&mut self, name: impl Into<String>, v: f64) {
        self.0.push((name.into(), v));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub mean: f64,
    pub std: f64,
    pub episodes: usize,
    /// Mean return of each evaluated agent.
    pub per_agent: Vec<f64>,
}

pub trait Workflow: Send {
    fn id(&self) -> &'static str;
    fn counters(&self) -> Counters;
    /// One training iteration; advances `counters().iteration` by one.
    fn step(&mut self, exec: &Executor) -> Result<Metrics>;
    /// Noise-free evaluation of the workflow's current solution.
    fn evaluate(&self, exec: &Executor) -> Result<EvalReport>;
    fn save(&self, ck: &mut Checkpoint);
    fn load(&mut self, ck: &Checkpoint) -> Result<()>;
}

/// Mean undiscounted return over exactly `episodes` episodes per agent.
pub fn evaluate<P: Policy>(
    exec: &Executor,
    env: &EnvSpec,
    agents: &[P],
    episodes: usize,
    num_envs: usize,
    key: RngKey,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::invalid("evaluation needs at least one episode"));
    }
    let lanes = num_envs.clamp(1, episodes);
    let res = batched_rollout(
        exec,
        env,
        agents,
        lanes,
        RolloutMode::Episodes(episodes),
        key,
        RolloutOptions::default(),
    )?;
    let per_agent: Vec<f64> = res.iter().map(|r| r.mean_return()).collect();
    let all: Vec<f64> = res.iter().flat_map(|r| r.episode_returns.iter().copied()).collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let std = (all.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    Ok(EvalReport {
        mean,
        std,
        episodes: all.len(),
        per_agent,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalSettings {
    pub episodes: usize,
    pub num_envs: usize,
}

impl EvalSettings {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        Ok(EvalSettings {
            episodes: cfg.usize("eval.episodes")?.max(1),
            num_envs: cfg.usize("eval.num_envs")?.max(1),
        })
    }
}

pub fn env_from_config(cfg: &Config) -> Result<EnvSpec> {
    let name = cfg.str("env.name");
    let id = EnvId::parse(name).ok_or_else(|| Error::config("env.name", format!("unknown environment `{name}`")))?;
    let mut spec = EnvSpec::new(id).with_fixed_horizon(cfg.bool("env.fixed_horizon"));
    let steps = cfg.u64("env.max_episode_steps")?;
    if steps > 0 {
        let steps = u32::try_from(steps).map_err(|_| Error::config("env.max_episode_steps", "too large"))?;
        spec = spec.with_max_episode_steps(steps)?;
    }
    Ok(spec)
}

pub(crate) fn obs_norm_mode(cfg: &Config, key: &str) -> Result<ObsNormMode> {
    ObsNormMode::parse(cfg.str(key)).ok_or_else(|| Error::config(key, "expected none, vbn or rs"))
}

/// Initial normalizer for `mode`; VBN statistics come from random-action rollouts.
pub(crate) fn init_norm(env: &EnvSpec, mode: ObsNormMode, vbn_steps: usize, key: RngKey) -> Result<ObsNorm> {
    match mode {
        ObsNormMode::Vbn => crate::rl::vbn_fit(env, key, vbn_steps.max(1)),
        m => Ok(ObsNorm::new(m, env.obs_dim)),
    }
}

pub(crate) fn parse_choice<'a>(cfg: &'a Config, key: &str, allowed: &[&str]) -> Result<&'a str> {
    let v = cfg.str(key);
    if allowed.contains(&v) {
        Ok(v)
    } else {
        Err(Error::config(key, format!("expected one of {}, got `{v}`", allowed.join(", "))))
    }
}

pub(crate) fn save_lanes(ck: &mut Checkpoint, p: &str, lanes: &Lanes) {
    let n = lanes.len();
    let mut phys = Vec::with_capacity(4 * n);
    let mut counts = Vec::with_capacity(n);
    let mut keys = Vec::with_capacity(2 * n);
    for s in &lanes.states {
        phys.extend_from_slice(&s.physical);
        counts.push(s.step_count as u64);
        let k = s.rng.to_u128();
        keys.push((k >> 64) as u64);
        keys.push(k as u64);
    }
    ck.put_f64s(&format!("{p}physical"), &phys);
    ck.put_u64s(&format!("{p}step_count"), &counts);
    ck.put_u64s(&format!("{p}rng"), &keys);
    ck.put_f64s(&format!("{p}obs"), lanes.obs.as_slice());
    ck.put_f64s(&format!("{p}episode_return"), &lanes.episode_return);
    ck.put_u64s(
        &format!("{p}episode_len"),
        &lanes.episode_len.iter().map(|&l| l as u64).collect::<Vec<_>>(),
    );
}

pub(crate) fn load_lanes(ck: &Checkpoint, p: &str, lanes: &mut Lanes) -> Result<()> {
    let n = lanes.len();
    let od = lanes.obs.cols();
    let phys = ck.f64s_len(&format!("{p}physical"), 4 * n)?;
    let counts = ck.u64s(&format!("{p}step_count"))?;
    let keys = ck.u64s(&format!("{p}rng"))?;
    let lens = ck.u64s(&format!("{p}episode_len"))?;
    if counts.len() != n || keys.len() != 2 * n || lens.len() != n {
        return Err(Error::Checkpoint("lane segments have the wrong length".into()));
    }
    let mut states = Vec::with_capacity(n);
    for l in 0..n {
        let mut physical = [0.0; 4];
        physical.copy_from_slice(&phys[4 * l..4 * l + 4]);
        states.push(EnvState {
            physical,
            step_count: counts[l] as u32,
            rng: RngKey::from_u128(((keys[2 * l] as u128) << 64) | keys[2 * l + 1] as u128),
        });
    }
    lanes.states = states;
    lanes.obs = Matrix::from_vec(n, od, ck.f64s_len(&format!("{p}obs"), n * od)?)?;
    lanes.episode_return = ck.f64s_len(&format!("{p}episode_return"), n)?;
    lanes.episode_len = lens.iter().map(|&l| l as u32).collect();
    Ok(())
}

/// Builds the workflow named by the `workflow` key.
pub fn build(cfg: &Config) -> Result<Box<dyn Workflow>> {
    let id = parse_choice(cfg, "workflow", WORKFLOW_IDS)?;
    Ok(match id {
        "es" => Box::new(EsWorkflow::from_config(cfg)?),
        "ppo" => Box::new(PpoWorkflow::from_config(cfg)?),
        "td3" => Box::new(Td3Workflow::from_config(cfg)?),
        "erl" => Box::new(ErlWorkflow::from_config(cfg)?),
        "cemrl" => Box::new(CemRlWorkflow::from_config(cfg)?),
        "pbt" | "pbt-cso" => pbt::build(cfg, id == "pbt-cso")?,
        _ => unreachable!(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{env_reset, step_into};
    use crate::exec::PolicyOutput;

    struct Zero;

    impl Policy for Zero {
        fn act(&self, obs: &Matrix, _: &[RngKey]) -> Result<PolicyOutput> {
            Ok(PolicyOutput::actions(Matrix::zeros(obs.rows(), 1)))
        }
    }

    #[test]
    fn zero_policy_matches_sequential_simulation() {
        let env = EnvSpec::pendulum().with_fixed_horizon(true);
        let key = RngKey::from_seed(11);
        let rep = evaluate(&Executor::sequential(), &env, &[Zero], 5, 2, key).unwrap();
        // lane l of agent 0 runs 3 or 2 episodes back to back
        let mut expect = Vec::new();
        for l in 0..2u64 {
            let lane = key.fold_in(0).fold_in(l);
            let (mut s, _) = env_reset(&env, lane.fold_in(0));
            let mut obs = vec![0.0; 3];
            for _ in 0..(if l == 0 { 3 } else { 2 }) {
                let mut ret = 0.0;
                loop {
                    let t = step_into(&env, &s, &[0.0], &mut obs).unwrap();
                    ret += t.reward;
                    if t.truncated {
                        s = env_reset(&env, t.state.rng).0;
                        break;
                    }
                    s = t.state;
                }
                expect.push(ret);
            }
        }
        let m = expect.iter().sum::<f64>() / 5.0;
        assert!((rep.mean - m).abs() < 1e-12, "{} {m}", rep.mean);
        assert_eq!(rep.episodes, 5);
        let one = evaluate(&Executor::sequential(), &env, &[Zero], 1, 16, key).unwrap();
        assert_eq!(one.mean, expect[0]);
    }
}
