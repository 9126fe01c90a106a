//! Side-effect-free classic-control dynamics with batched auto-reset.
//!
//! Actions are passed as `f64` slices of length [`ActionSpace::dim`]. A discrete
//! action is a single slot holding the action index.

mod cartpole;
mod pendulum;

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::exec::RngKey;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvId {
    CartPole,
    Pendulum,
}

impl EnvId {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "cartpole" => Some(EnvId::CartPole),
            "pendulum" => Some(EnvId::Pendulum),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvId::CartPole => "cartpole",
            EnvId::Pendulum => "pendulum",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous { low: f64, high: f64, dim: usize },
}

impl ActionSpace {
    /// Width of an action slice.
    pub fn dim(&self) -> usize {
        match *self {
            ActionSpace::Discrete(_) => 1,
            ActionSpace::Continuous { dim, .. } => dim,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpace::Discrete(_))
    }

    /// Draws a uniformly random valid action.
    pub fn sample(&self, rng: &mut impl RngCore, out: &mut [f64]) {
        match *self {
            ActionSpace::Discrete(n) => out[0] = rng.random_range(0..n) as f64,
            ActionSpace::Continuous { low, high, .. } => {
                for a in out.iter_mut() {
                    *a = low + (high - low) * rng.random::<f64>();
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvSpec {
    pub id: EnvId,
    pub obs_dim: usize,
    pub action_space: ActionSpace,
    pub max_episode_steps: u32,
    /// Truncate only at the horizon and never report termination.
    pub fixed_horizon: bool,
    /// Integration step.
    pub dt: f64,
}

impl EnvSpec {
    pub fn cartpole() -> Self {
        EnvSpec {
            id: EnvId::CartPole,
            obs_dim: 4,
            action_space: ActionSpace::Discrete(2),
            max_episode_steps: 500,
            fixed_horizon: false,
            dt: cartpole::TAU,
        }
    }

    pub fn pendulum() -> Self {
        EnvSpec {
            id: EnvId::Pendulum,
            obs_dim: 3,
            action_space: ActionSpace::Continuous {
                low: -pendulum::MAX_TORQUE,
                high: pendulum::MAX_TORQUE,
                dim: 1,
            },
            max_episode_steps: 200,
            fixed_horizon: false,
            dt: pendulum::DT,
        }
    }

    pub fn new(id: EnvId) -> Self {
        match id {
            EnvId::CartPole => Self::cartpole(),
            EnvId::Pendulum => Self::pendulum(),
        }
    }

    pub fn with_fixed_horizon(mut self, on: bool) -> Self {
        self.fixed_horizon = on;
        self
    }

    pub fn with_max_episode_steps(mut self, steps: u32) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("max_episode_steps must be positive"));
        }
        self.max_episode_steps = steps;
        Ok(self)
    }

    pub fn action_dim(&self) -> usize {
        self.action_space.dim()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvState {
    /// CartPole: `[x, x_dot, theta, theta_dot]`; Pendulum: `[theta, theta_dot, 0, 0]`.
    pub physical: [f64; 4],
    pub step_count: u32,
    /// Key consumed by the next reset of this lane.
    pub rng: RngKey,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    /// Observation after the step; after an auto-reset this is the fresh episode's first observation.
    pub obs: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    /// Observation of the finished episode's last state, present only when the lane was reset.
    pub final_obs: Option<Vec<f64>>,
}

impl StepResult {
    pub fn done(&self) -> bool {
        self.terminated || self.truncated
    }
}

/// Resets using draws from `rng`; `next_key` is stored for the following reset.
pub fn reset_with_rng(spec: &EnvSpec, rng: &mut impl RngCore, next_key: RngKey) -> EnvState {
    let physical = match spec.id {
        EnvId::CartPole => cartpole::initial_state(rng),
        EnvId::Pendulum => pendulum::initial_state(rng),
    };
    EnvState {
        physical,
        step_count: 0,
        rng: next_key,
    }
}

pub fn env_reset(spec: &EnvSpec, key: RngKey) -> (EnvState, Vec<f64>) {
    let mut rng = key.fold_in(0).rng();
    let state = reset_with_rng(spec, &mut rng, key.fold_in(1));
    let mut obs = vec![0.0; spec.obs_dim];
    observe(spec, &state, &mut obs);
    (state, obs)
}

pub fn observe(spec: &EnvSpec, state: &EnvState, out: &mut [f64]) {
    match spec.id {
        EnvId::CartPole => out[..4].copy_from_slice(&state.physical),
        EnvId::Pendulum => pendulum::observe(&state.physical, out),
    }
}

/// Outcome of one transition, with the successor observation written to a caller buffer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub state: EnvState,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
}

/// Allocation-free single step; writes the successor observation into `obs_out`.
pub fn step_into(
    spec: &EnvSpec,
    state: &EnvState,
    action: &[f64],
    obs_out: &mut [f64],
) -> Result<Transition> {
    if action.len() != spec.action_dim() {
        return Err(Error::shape(format!(
            "action width {} for action space of width {}",
            action.len(),
            spec.action_dim()
        )));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::numeric("non-finite action"));
    }
    if state.physical.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite environment state"));
    }
    let (physical, reward, mut terminated) = match spec.id {
        EnvId::CartPole => {
            let a = action[0];
            let push_right = if a == 0.0 {
                false
            } else if a == 1.0 {
                true
            } else {
                return Err(Error::invalid(format!("discrete action {a} outside {{0, 1}}")));
            };
            cartpole::dynamics(&state.physical, push_right)
        }
        EnvId::Pendulum => {
            let (p, r) = pendulum::dynamics(&state.physical, action[0], spec.dt);
            (p, r, false)
        }
    };
    if physical.iter().any(|v| !v.is_finite()) || !reward.is_finite() {
        return Err(Error::numeric("environment dynamics diverged"));
    }
    let step_count = state.step_count + 1;
    let truncated = step_count >= spec.max_episode_steps;
    if spec.fixed_horizon {
        terminated = false;
    }
    let next = EnvState {
        physical,
        step_count,
        rng: state.rng,
    };
    observe(spec, &next, obs_out);
    Ok(Transition {
        state: next,
        reward,
        terminated,
        truncated: truncated && !terminated,
    })
}

pub fn env_step(spec: &EnvSpec, state: &EnvState, action: &[f64]) -> Result<(EnvState, StepResult)> {
    let mut obs = vec![0.0; spec.obs_dim];
    let t = step_into(spec, state, action, &mut obs)?;
    Ok((
        t.state,
        StepResult {
            obs,
            reward: t.reward,
            terminated: t.terminated,
            truncated: t.truncated,
            final_obs: None,
        },
    ))
}

/// Step followed by an immediate reset when the episode ended. The reset key is
/// taken from the lane's own state, so the result is independent of other lanes.
pub fn step_auto_reset(
    spec: &EnvSpec,
    state: &EnvState,
    action: &[f64],
) -> Result<(EnvState, StepResult)> {
    let (next, mut result) = env_step(spec, state, action)?;
    if result.done() {
        let (fresh, obs) = env_reset(spec, next.rng);
        result.final_obs = Some(std::mem::replace(&mut result.obs, obs));
        Ok((fresh, result))
    } else {
        Ok((next, result))
    }
}

/// Element-wise [`step_auto_reset`]; `actions` is row-major `n x action_dim`.
pub fn batched_step(
    spec: &EnvSpec,
    states: &[EnvState],
    actions: &[f64],
) -> Result<(Vec<EnvState>, Vec<StepResult>)> {
    if states.is_empty() {
        return Err(Error::invalid("batched_step needs at least one environment"));
    }
    let width = spec.action_dim();
    if actions.len() != states.len() * width {
        return Err(Error::shape(format!(
            "{} action values for {} environments of action width {width}",
            actions.len(),
            states.len()
        )));
    }
    let mut next_states = Vec::with_capacity(states.len());
    let mut results = Vec::with_capacity(states.len());
    for (i, (s, a)) in states.iter().zip(actions.chunks_exact(width)).enumerate() {
        let (ns, r) = step_auto_reset(spec, s, a).map_err(|e| match e {
            Error::Numeric(m) => Error::Numeric(format!("environment {i}: {m}")),
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("environment {i}: {m}")),
            other => other,
        })?;
        next_states.push(ns);
        results.push(r);
    }
    Ok((next_states, results))
}

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::PI;
    let r = theta.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    /// Generator whose every draw is zero, so uniforms sit at the low end of their range.
    struct ZeroRng;

    impl RngCore for ZeroRng {
        fn next_u32(&mut self) -> u32 {
            0
        }
        fn next_u64(&mut self) -> u64 {
            0
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            dst.fill(0)
        }
    }

    #[test]
    fn pendulum_reset_low_end() {
        let spec = EnvSpec::pendulum();
        let s = reset_with_rng(&spec, &mut ZeroRng, RngKey::from_seed(0));
        assert_eq!(s.physical[0], -PI);
        assert_eq!(s.physical[1], -1.0);
        let mut obs = [0.0; 3];
        observe(&spec, &s, &mut obs);
        assert_eq!(obs[0], -1.0);
        assert!(obs[1].abs() < 1e-15);
        assert_eq!(obs[2], -1.0);
    }

    #[test]
    fn cartpole_reset_symmetric_stub() {
        // Uniform(-0.05, 0.05) evaluated at u = 0.5 for every draw.
        struct HalfRng;
        impl RngCore for HalfRng {
            fn next_u32(&mut self) -> u32 {
                1 << 31
            }
            fn next_u64(&mut self) -> u64 {
                1 << 63
            }
            fn fill_bytes(&mut self, dst: &mut [u8]) {
                dst.fill(0)
            }
        }
        let spec = EnvSpec::cartpole();
        let s = reset_with_rng(&spec, &mut HalfRng, RngKey::from_seed(0));
        assert_eq!(s.physical, [0.0; 4]);
    }

    #[test]
    fn reset_ranges_and_determinism() {
        for seed in 0..200 {
            let key = RngKey::from_seed(seed);
            let (c, _) = env_reset(&EnvSpec::cartpole(), key);
            assert!(c.physical.iter().all(|v| v.abs() <= 0.05));
            assert_eq!(c, env_reset(&EnvSpec::cartpole(), key).0);
            let (p, obs) = env_reset(&EnvSpec::pendulum(), key);
            assert!(p.physical[0].abs() <= PI && p.physical[1].abs() <= 1.0);
            assert_eq!(p.step_count, 0);
            assert_eq!(obs[0], p.physical[0].cos());
        }
    }

    fn pend_state(theta: f64, theta_dot: f64) -> EnvState {
        EnvState {
            physical: [theta, theta_dot, 0.0, 0.0],
            step_count: 0,
            rng: RngKey::from_seed(0),
        }
    }

    #[test]
    fn pendulum_equilibrium() {
        let (s, r) = env_step(&EnvSpec::pendulum(), &pend_state(0.0, 0.0), &[0.0]).unwrap();
        assert_eq!(s.physical[0], 0.0);
        assert_eq!(s.physical[1], 0.0);
        assert_eq!(r.reward, 0.0);
        assert!(!r.terminated && !r.truncated);
    }

    #[test]
    fn pendulum_quarter_turn() {
        let (s, r) = env_step(&EnvSpec::pendulum(), &pend_state(PI / 2.0, 0.0), &[0.0]).unwrap();
        // theta_ddot = 15, theta_dot' = 0.75, theta' = pi/2 + 0.0375
        assert!((s.physical[1] - 0.75).abs() < 1e-12);
        assert!((s.physical[0] - 1.6083).abs() < 1e-4);
        assert!((s.physical[0] - (PI / 2.0 + 0.0375)).abs() < 1e-12);
        assert!((r.reward + 2.4674).abs() < 1e-4);
    }

    #[test]
    fn pendulum_clips_torque_and_speed() {
        let spec = EnvSpec::pendulum();
        let (a, ra) = env_step(&spec, &pend_state(0.3, 0.0), &[50.0]).unwrap();
        let (b, rb) = env_step(&spec, &pend_state(0.3, 0.0), &[2.0]).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.reward, rb.reward);
        let (c, _) = env_step(&spec, &pend_state(0.0, 7.99), &[2.0]).unwrap();
        assert!(c.physical[1] <= 8.0);
    }

    #[test]
    fn cartpole_push_right_from_rest() {
        let s = EnvState {
            physical: [0.0; 4],
            step_count: 0,
            rng: RngKey::from_seed(0),
        };
        let (n, r) = env_step(&EnvSpec::cartpole(), &s, &[1.0]).unwrap();
        assert_eq!(n.physical[0], 0.0);
        assert!((n.physical[1] - 0.1951).abs() < 1e-4);
        assert_eq!(n.physical[2], 0.0);
        assert!((n.physical[3] + 0.2927).abs() < 1e-4);
        assert_eq!(r.reward, 1.0);
    }

    #[test]
    fn cartpole_terminates_out_of_bounds() {
        let s = EnvState {
            physical: [2.45, 1.0, 0.0, 0.0],
            step_count: 3,
            rng: RngKey::from_seed(0),
        };
        let (_, r) = env_step(&EnvSpec::cartpole(), &s, &[1.0]).unwrap();
        assert!(r.terminated && !r.truncated);
        assert_eq!(r.reward, 1.0);
        let (_, r) = env_step(&EnvSpec::cartpole().with_fixed_horizon(true), &s, &[1.0]).unwrap();
        assert!(!r.terminated);
    }

    #[test]
    fn truncation_at_horizon() {
        let spec = EnvSpec::pendulum();
        let mut s = pend_state(1.0, 0.0);
        s.step_count = spec.max_episode_steps - 1;
        let (_, r) = env_step(&spec, &s, &[0.0]).unwrap();
        assert!(r.truncated && !r.terminated);
    }

    #[test]
    fn non_finite_inputs_fault() {
        let spec = EnvSpec::pendulum();
        assert!(matches!(
            env_step(&spec, &pend_state(0.0, 0.0), &[f64::NAN]),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            env_step(&spec, &pend_state(f64::INFINITY, 0.0), &[0.0]),
            Err(Error::Numeric(_))
        ));
        assert!(env_step(&EnvSpec::cartpole(), &pend_state(0.0, 0.0), &[2.0]).is_err());
    }

    #[test]
    fn batched_single_matches_env_step() {
        let spec = EnvSpec::pendulum();
        let (s, _) = env_reset(&spec, RngKey::from_seed(3));
        let (a, ra) = env_step(&spec, &s, &[0.7]).unwrap();
        let (b, rb) = batched_step(&spec, &[s], &[0.7]).unwrap();
        assert_eq!(a, b[0]);
        assert_eq!(ra, rb[0]);
    }

    #[test]
    fn batched_boundary_resets_only_finished_lane() {
        let spec = EnvSpec::pendulum();
        let mut states: Vec<_> = (0..3)
            .map(|i| env_reset(&spec, RngKey::from_seed(i)).0)
            .collect();
        states[2].step_count = spec.max_episode_steps - 1;
        let (next, res) = batched_step(&spec, &states, &[0.0, 0.0, 0.0]).unwrap();
        assert!(!res[0].truncated && !res[1].truncated);
        assert!(res[2].truncated);
        assert_eq!(next[2].step_count, 0);
        let (fresh, obs) = env_reset(&spec, states[2].rng);
        assert_eq!(next[2], fresh);
        assert_eq!(res[2].obs, obs);
        assert!(res[2].final_obs.is_some());
    }

    #[test]
    fn batched_matches_sequential_loop() {
        let spec = EnvSpec::cartpole();
        let n = 64;
        let mut batched: Vec<_> = (0..n)
            .map(|i| env_reset(&spec, RngKey::from_seed(9).fold_in(i)).0)
            .collect();
        let mut seq = batched.clone();
        for t in 0..300u64 {
            let actions: Vec<f64> = (0..n).map(|i| ((i as u64 + t) % 2) as f64).collect();
            let (nb, rb) = batched_step(&spec, &batched, &actions).unwrap();
            for i in 0..n as usize {
                let (ns, mut r) = env_step(&spec, &seq[i], &actions[i..i + 1]).unwrap();
                let ns = if r.done() {
                    let (fresh, obs) = env_reset(&spec, ns.rng);
                    r.final_obs = Some(std::mem::replace(&mut r.obs, obs));
                    fresh
                } else {
                    ns
                };
                assert_eq!(ns, nb[i]);
                assert_eq!(r, rb[i]);
                seq[i] = ns;
            }
            batched = nb;
        }
    }

    #[test]
    fn batched_reports_offending_index() {
        let spec = EnvSpec::pendulum();
        let s = pend_state(0.0, 0.0);
        let err = batched_step(&spec, &[s, s], &[0.0, f64::NAN]).unwrap_err();
        assert!(err.to_string().contains("environment 1"));
    }

    #[test]
    fn pendulum_energy_drift_small_dt() {
        let mut spec = EnvSpec::pendulum();
        spec.dt = 0.005;
        spec.max_episode_steps = 100_000;
        // theta measured from upright; rod of mass 1 and length 1 about its end.
        let energy = |p: &[f64; 4]| p[1] * p[1] / 6.0 + 5.0 * p[0].cos();
        let mut s = pend_state(PI, 2.0);
        for _ in 0..2000 {
            let e0 = energy(&s.physical);
            let (n, _) = env_step(&spec, &s, &[0.0]).unwrap();
            let e1 = energy(&n.physical);
            assert!(((e1 - e0) / e0).abs() < 1e-3);
            s = n;
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-15);
        assert!((wrap_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-12);
        for i in -100..100 {
            let w = wrap_angle(i as f64 * 0.37);
            assert!(w > -PI && w <= PI);
        }
    }

    #[test]
    fn fixed_horizon_return_is_plain_sum() {
        let spec = EnvSpec::pendulum().with_fixed_horizon(true);
        let (mut s, _) = env_reset(&spec, RngKey::from_seed(1));
        let mut rewards = Vec::new();
        loop {
            let (n, r) = env_step(&spec, &s, &[0.5]).unwrap();
            rewards.push(r.reward);
            s = n;
            if r.done() {
                break;
            }
        }
        assert_eq!(rewards.len(), 200);
        let total: f64 = rewards.iter().sum();
        let mut acc = 0.0;
        for r in &rewards {
            acc += r;
        }
        assert_eq!(total, acc);
    }
}
