// Batched rollouts over an (agent x environment) lane grid.
//
// Lane `(a, l)` of a fresh rollout derives everything from
// `fold_in(fold_in(key, a), l)`: the environment reset key is its child 0 and the
// per-step action keys are children of its child 1. Lanes of one agent are
// forwarded through the policy as one batch; because network rows are computed
// independently, a lane's trajectory does not depend on which other lanes share
// its batch or worker.

use super::{Executor, RngKey};
use crate::env::{env_reset, step_into, EnvSpec, EnvState};
use crate::error::{Error, Result};
use crate::net::Matrix;

/// Actions for a batch of observations.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyOutput {
    pub actions: Matrix,
    /// Behaviour log-probabilities (stochastic policies).
    pub log_probs: Option<Vec<f64>>,
    /// Value estimates (actor-critic policies).
    pub values: Option<Vec<f64>>,
}

impl PolicyOutput {
    pub fn actions(actions: Matrix) -> Self {
        PolicyOutput {
            actions,
            log_probs: None,
            values: None,
        }
    }
}

pub trait Policy: Sync {
    /// `keys[i]` is the randomness for row `i`; deterministic policies ignore it.
    fn act(&self, obs: &Matrix, keys: &[RngKey]) -> Result<PolicyOutput>;
}

impl<P: Policy + ?Sized> Policy for &P {
    fn act(&self, obs: &Matrix, keys: &[RngKey]) -> Result<PolicyOutput> {
        (**self).act(obs, keys)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    /// Exactly this many transitions per lane.
    Steps(usize),
    /// Exactly this many completed episodes per agent, spread over its lanes.
    Episodes(usize),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RolloutOptions {
    /// Keep the transitions in a [`SampleBatch`].
    pub collect: bool,
}

/// Transitions in struct-of-arrays form. `next_obs` is always the true
/// successor, also for the last step of an episode that was auto-reset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleBatch {
    pub obs: Matrix,
    pub actions: Matrix,
    pub rewards: Vec<f64>,
    pub terminated: Vec<bool>,
    pub truncated: Vec<bool>,
    pub next_obs: Matrix,
    pub log_probs: Option<Vec<f64>>,
    pub values: Option<Vec<f64>>,
}

impl SampleBatch {
    pub fn empty(obs_dim: usize, action_dim: usize) -> Self {
        SampleBatch {
            obs: Matrix::zeros(0, obs_dim),
            actions: Matrix::zeros(0, action_dim),
            next_obs: Matrix::zeros(0, obs_dim),
            ..Default::default()
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn done(&self, i: usize) -> bool {
        self.terminated[i] || self.truncated[i]
    }

    /// Appends `other`; optional columns survive only if both sides carry them.
    pub fn append(&mut self, other: &SampleBatch) -> Result<()> {
        if self.obs.cols() != other.obs.cols() || self.actions.cols() != other.actions.cols() {
            return Err(Error::shape("appending batches of different widths"));
        }
        let was_empty = self.is_empty();
        self.obs = cat_rows(&self.obs, &other.obs);
        self.actions = cat_rows(&self.actions, &other.actions);
        self.next_obs = cat_rows(&self.next_obs, &other.next_obs);
        self.rewards.extend_from_slice(&other.rewards);
        self.terminated.extend_from_slice(&other.terminated);
        self.truncated.extend_from_slice(&other.truncated);
        self.log_probs = merge_opt(self.log_probs.take(), &other.log_probs, was_empty);
        self.values = merge_opt(self.values.take(), &other.values, was_empty);
        Ok(())
    }

    /// Rows `idx`, in order.
    pub fn gather(&self, idx: &[usize]) -> SampleBatch {
        let pick = |v: &Vec<f64>| idx.iter().map(|&i| v[i]).collect();
        SampleBatch {
            obs: self.obs.gather_rows(idx),
            actions: self.actions.gather_rows(idx),
            rewards: pick(&self.rewards),
            terminated: idx.iter().map(|&i| self.terminated[i]).collect(),
            truncated: idx.iter().map(|&i| self.truncated[i]).collect(),
            next_obs: self.next_obs.gather_rows(idx),
            log_probs: self.log_probs.as_ref().map(pick),
            values: self.values.as_ref().map(pick),
        }
    }
}

fn cat_rows(a: &Matrix, b: &Matrix) -> Matrix {
    let mut v = Vec::with_capacity(a.as_slice().len() + b.as_slice().len());
    v.extend_from_slice(a.as_slice());
    v.extend_from_slice(b.as_slice());
    Matrix::from_vec(a.rows() + b.rows(), a.cols(), v).expect("equal widths")
}

fn merge_opt(a: Option<Vec<f64>>, b: &Option<Vec<f64>>, a_empty: bool) -> Option<Vec<f64>> {
    match (a, b) {
        (Some(mut a), Some(b)) => {
            a.extend_from_slice(b);
            Some(a)
        }
        (None, Some(b)) if a_empty => Some(b.clone()),
        _ => None,
    }
}

/// Per-agent rollout outcome.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RolloutResult {
    /// Undiscounted returns of completed episodes, lane-major.
    pub episode_returns: Vec<f64>,
    pub episode_lengths: Vec<u32>,
    pub env_steps: u64,
    /// Lane-major transitions when collection was requested.
    pub batch: Option<SampleBatch>,
}

impl RolloutResult {
    pub fn mean_return(&self) -> f64 {
        if self.episode_returns.is_empty() {
            return f64::NAN;
        }
        self.episode_returns.iter().sum::<f64>() / self.episode_returns.len() as f64
    }
}

/// Persistent environment lanes for step-budgeted collection across calls.
#[derive(Clone, Debug, PartialEq)]
pub struct Lanes {
    pub states: Vec<EnvState>,
    pub obs: Matrix,
    pub episode_return: Vec<f64>,
    pub episode_len: Vec<u32>,
}

impl Lanes {
    /// Lane `l` is reset with `fold_in(key, l)`.
    pub fn new(spec: &EnvSpec, n: usize, key: RngKey) -> Self {
        let mut states = Vec::with_capacity(n);
        let mut obs = Matrix::zeros(n, spec.obs_dim);
        for l in 0..n {
            let (s, o) = env_reset(spec, key.fold_in(l as u64));
            states.push(s);
            obs.row_mut(l).copy_from_slice(&o);
        }
        Lanes {
            states,
            obs,
            episode_return: vec![0.0; n],
            episode_len: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

#[derive(Clone, Copy)]
enum Stop<'a> {
    Steps(usize),
    Quotas(&'a [usize]),
}

struct Chunk {
    states: Vec<EnvState>,
    obs: Vec<f64>,
    ret: Vec<f64>,
    len: Vec<u32>,
    act_keys: Vec<RngKey>,
}

#[derive(Default)]
struct LaneOut {
    returns: Vec<f64>,
    lengths: Vec<u32>,
    steps: u64,
    batch: Option<LaneBatch>,
}

#[derive(Default)]
struct LaneBatch {
    obs: Vec<f64>,
    actions: Vec<f64>,
    rewards: Vec<f64>,
    terminated: Vec<bool>,
    truncated: Vec<bool>,
    next_obs: Vec<f64>,
    log_probs: Vec<f64>,
    values: Vec<f64>,
    has_log_probs: bool,
    has_values: bool,
}

fn run_chunk<P: Policy + ?Sized>(
    spec: &EnvSpec,
    policy: &P,
    chunk: &mut Chunk,
    stop: Stop<'_>,
    collect: bool,
) -> Result<Vec<LaneOut>> {
    let n = chunk.states.len();
    let od = spec.obs_dim;
    let ad = spec.action_dim();
    let mut outs: Vec<LaneOut> = (0..n)
        .map(|_| LaneOut {
            batch: collect.then(LaneBatch::default),
            ..Default::default()
        })
        .collect();
    let quota = |l: usize| match stop {
        Stop::Steps(_) => usize::MAX,
        Stop::Quotas(q) => q[l],
    };
    let mut active: Vec<usize> = (0..n).filter(|&l| quota(l) > 0).collect();
    let mut t = 0usize;
    let mut next_obs = vec![0.0; od];
    while !active.is_empty() {
        if let Stop::Steps(limit) = stop {
            if t >= limit {
                break;
            }
        }
        let mut batch_obs = Vec::with_capacity(active.len() * od);
        let mut keys = Vec::with_capacity(active.len());
        for &l in &active {
            batch_obs.extend_from_slice(&chunk.obs[l * od..(l + 1) * od]);
            keys.push(chunk.act_keys[l].fold_in(outs[l].steps));
        }
        let obs_m = Matrix::from_vec(active.len(), od, batch_obs)?;
        let out = policy.act(&obs_m, &keys).map_err(|e| lane_error(e, None))?;
        if out.actions.rows() != active.len() || out.actions.cols() != ad {
            return Err(Error::shape("policy returned the wrong action shape"));
        }
        let mut still = Vec::with_capacity(active.len());
        for (row, &l) in active.iter().enumerate() {
            let action = out.actions.row(row);
            let tr = step_into(spec, &chunk.states[l], action, &mut next_obs)
                .map_err(|e| lane_error(e, Some(l)))?;
            let lo = &mut outs[l];
            lo.steps += 1;
            chunk.ret[l] += tr.reward;
            chunk.len[l] += 1;
            if let Some(b) = lo.batch.as_mut() {
                b.obs.extend_from_slice(&chunk.obs[l * od..(l + 1) * od]);
                b.actions.extend_from_slice(action);
                b.rewards.push(tr.reward);
                b.terminated.push(tr.terminated);
                b.truncated.push(tr.truncated);
                b.next_obs.extend_from_slice(&next_obs);
                if let Some(lp) = &out.log_probs {
                    b.log_probs.push(lp[row]);
                    b.has_log_probs = true;
                }
                if let Some(v) = &out.values {
                    b.values.push(v[row]);
                    b.has_values = true;
                }
            }
            if tr.terminated || tr.truncated {
                lo.returns.push(chunk.ret[l]);
                lo.lengths.push(chunk.len[l]);
                chunk.ret[l] = 0.0;
                chunk.len[l] = 0;
                let (fresh, obs) = env_reset(spec, tr.state.rng);
                chunk.states[l] = fresh;
                chunk.obs[l * od..(l + 1) * od].copy_from_slice(&obs);
            } else {
                chunk.states[l] = tr.state;
                chunk.obs[l * od..(l + 1) * od].copy_from_slice(&next_obs);
            }
            if lo.returns.len() < quota(l) {
                still.push(l);
            }
        }
        active = still;
        t += 1;
    }
    Ok(outs)
}

fn lane_error(e: Error, lane: Option<usize>) -> Error {
    let tag = |m: String| match lane {
        Some(l) => format!("lane {l}: {m}"),
        None => m,
    };
    match e {
        Error::Numeric(m) => Error::Numeric(tag(m)),
        Error::InvalidArgument(m) => Error::InvalidArgument(tag(m)),
        other => other,
    }
}

fn tag_agent(e: Error, agent: usize, lane_offset: usize) -> Error {
    // rewrites "lane i" (chunk-local) into grid coordinates
    let fix = |m: String| {
        if let Some(rest) = m.strip_prefix("lane ") {
            if let Some((idx, tail)) = rest.split_once(':') {
                if let Ok(i) = idx.parse::<usize>() {
                    return format!("agent {agent}, env {}:{tail}", i + lane_offset);
                }
            }
        }
        format!("agent {agent}: {m}")
    };
    match e {
        Error::Numeric(m) => Error::Numeric(fix(m)),
        Error::InvalidArgument(m) => Error::InvalidArgument(fix(m)),
        other => other,
    }
}

fn assemble(spec: &EnvSpec, lanes: Vec<LaneOut>, collect: bool) -> Result<RolloutResult> {
    let mut res = RolloutResult::default();
    let mut batch = collect.then(|| SampleBatch::empty(spec.obs_dim, spec.action_dim()));
    let mut obs = Vec::new();
    let mut actions = Vec::new();
    let mut next_obs = Vec::new();
    let mut log_probs = Some(Vec::new());
    let mut values = Some(Vec::new());
    for lo in lanes {
        res.episode_returns.extend_from_slice(&lo.returns);
        res.episode_lengths.extend_from_slice(&lo.lengths);
        res.env_steps += lo.steps;
        if let (Some(b), Some(lb)) = (batch.as_mut(), lo.batch) {
            obs.extend_from_slice(&lb.obs);
            actions.extend_from_slice(&lb.actions);
            next_obs.extend_from_slice(&lb.next_obs);
            b.rewards.extend_from_slice(&lb.rewards);
            b.terminated.extend_from_slice(&lb.terminated);
            b.truncated.extend_from_slice(&lb.truncated);
            if !lb.rewards.is_empty() && !lb.has_log_probs {
                log_probs = None;
            }
            if !lb.rewards.is_empty() && !lb.has_values {
                values = None;
            }
            if let Some(v) = log_probs.as_mut() {
                v.extend_from_slice(&lb.log_probs);
            }
            if let Some(v) = values.as_mut() {
                v.extend_from_slice(&lb.values);
            }
        }
    }
    if let Some(b) = batch.as_mut() {
        let n = b.rewards.len();
        b.obs = Matrix::from_vec(n, spec.obs_dim, obs)?;
        b.actions = Matrix::from_vec(n, spec.action_dim(), actions)?;
        b.next_obs = Matrix::from_vec(n, spec.obs_dim, next_obs)?;
        b.log_probs = log_probs.filter(|_| n > 0);
        b.values = values.filter(|_| n > 0);
    }
    res.batch = batch;
    Ok(res)
}

fn chunk_bounds(n: usize, parts: usize) -> Vec<(usize, usize)> {
    let parts = parts.clamp(1, n.max(1));
    (0..parts)
        .map(|p| (p * n / parts, (p + 1) * n / parts))
        .filter(|(a, b)| b > a)
        .collect()
}

/// Runs every agent on `envs_per_agent` freshly reset lanes.
///
/// In `Episodes(k)` mode lane `l` of an agent completes `k / e + (l < k % e)`
/// episodes. Results are returned per agent, in agent order.
pub fn batched_rollout<P: Policy>(
    exec: &Executor,
    spec: &EnvSpec,
    agents: &[P],
    envs_per_agent: usize,
    mode: RolloutMode,
    key: RngKey,
    opts: RolloutOptions,
) -> Result<Vec<RolloutResult>> {
    let m = agents.len();
    let e = envs_per_agent;
    if m == 0 || e == 0 {
        return Err(Error::invalid("a rollout needs at least one agent and one environment"));
    }
    let quotas: Vec<usize> = match mode {
        RolloutMode::Episodes(k) => (0..e).map(|l| k / e + usize::from(l < k % e)).collect(),
        RolloutMode::Steps(_) => Vec::new(),
    };
    let parts_per_agent = if m >= exec.workers() {
        1
    } else {
        exec.workers().div_ceil(m)
    };
    let bounds = chunk_bounds(e, parts_per_agent);
    let units: Vec<(usize, usize, usize)> = (0..m)
        .flat_map(|a| bounds.iter().map(move |&(s, t)| (a, s, t)))
        .collect();
    let results = exec.map_indexed(units.len(), |u| {
        let (a, s, t) = units[u];
        let agent_key = key.fold_in(a as u64);
        let mut chunk = Chunk {
            states: Vec::with_capacity(t - s),
            obs: Vec::with_capacity((t - s) * spec.obs_dim),
            ret: vec![0.0; t - s],
            len: vec![0; t - s],
            act_keys: Vec::with_capacity(t - s),
        };
        for l in s..t {
            let lane_key = agent_key.fold_in(l as u64);
            let (st, o) = env_reset(spec, lane_key.fold_in(0));
            chunk.states.push(st);
            chunk.obs.extend_from_slice(&o);
            chunk.act_keys.push(lane_key.fold_in(1));
        }
        let stop = match mode {
            RolloutMode::Steps(n) => Stop::Steps(n),
            RolloutMode::Episodes(_) => Stop::Quotas(&quotas[s..t]),
        };
        run_chunk(spec, &agents[a], &mut chunk, stop, opts.collect).map_err(|e| tag_agent(e, a, s))
    });
    let mut per_agent: Vec<Vec<LaneOut>> = (0..m).map(|_| Vec::with_capacity(e)).collect();
    for (u, r) in results.into_iter().enumerate() {
        per_agent[units[u].0].extend(r?);
    }
    per_agent
        .into_iter()
        .map(|lanes| assemble(spec, lanes, opts.collect))
        .collect()
}

/// Advances persistent lanes by `steps` transitions each. Lane `l` draws its
/// action keys from `fold_in(key, l)`.
pub fn rollout_lanes<P: Policy + ?Sized>(
    exec: &Executor,
    spec: &EnvSpec,
    policy: &P,
    lanes: &mut Lanes,
    steps: usize,
    key: RngKey,
    opts: RolloutOptions,
) -> Result<RolloutResult> {
    let n = lanes.len();
    if n == 0 {
        return Err(Error::invalid("no lanes to roll out"));
    }
    let od = spec.obs_dim;
    let bounds = chunk_bounds(n, exec.workers());
    let mut jobs: Vec<(Chunk, Option<Result<Vec<LaneOut>>>)> = bounds
        .iter()
        .map(|&(s, t)| {
            (
                Chunk {
                    states: lanes.states[s..t].to_vec(),
                    obs: lanes.obs.as_slice()[s * od..t * od].to_vec(),
                    ret: lanes.episode_return[s..t].to_vec(),
                    len: lanes.episode_len[s..t].to_vec(),
                    act_keys: (s..t).map(|l| key.fold_in(l as u64)).collect(),
                },
                None,
            )
        })
        .collect();
    exec.for_each_mut(&mut jobs, |i, (chunk, out)| {
        *out = Some(
            run_chunk(spec, policy, chunk, Stop::Steps(steps), opts.collect)
                .map_err(|e| tag_agent(e, 0, bounds[i].0)),
        );
    });
    let mut all = Vec::with_capacity(n);
    for ((chunk, out), &(s, t)) in jobs.into_iter().zip(&bounds) {
        all.extend(out.expect("job ran")?);
        lanes.states[s..t].copy_from_slice(&chunk.states);
        lanes.obs.as_mut_slice()[s * od..t * od].copy_from_slice(&chunk.obs);
        lanes.episode_return[s..t].copy_from_slice(&chunk.ret);
        lanes.episode_len[s..t].copy_from_slice(&chunk.len);
    }
    assemble(spec, all, opts.collect)
}
