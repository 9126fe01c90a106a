use std::f64::consts::PI;

use rand::{Rng, RngCore};

use super::wrap_angle;

pub(super) const DT: f64 = 0.05;
pub(super) const MAX_TORQUE: f64 = 2.0;
const MAX_SPEED: f64 = 8.0;
const G: f64 = 10.0;
const M: f64 = 1.0;
const L: f64 = 1.0;

pub(super) fn initial_state(rng: &mut impl RngCore) -> [f64; 4] {
    let theta = -PI + 2.0 * PI * rng.random::<f64>();
    let theta_dot = -1.0 + 2.0 * rng.random::<f64>();
    [theta, theta_dot, 0.0, 0.0]
}

pub(super) fn observe(s: &[f64; 4], out: &mut [f64]) {
    out[0] = s[0].cos();
    out[1] = s[0].sin();
    out[2] = s[1];
}

/// Semi-implicit Euler step; the reward is charged on the pre-step state.
pub(super) fn dynamics(s: &[f64; 4], torque: f64, dt: f64) -> ([f64; 4], f64) {
    let [theta, theta_dot, _, _] = *s;
    let u = torque.clamp(-MAX_TORQUE, MAX_TORQUE);
    let w = wrap_angle(theta);
    let reward = -(w * w + 0.1 * theta_dot * theta_dot + 0.001 * u * u);
    let theta_acc = 3.0 * G / (2.0 * L) * theta.sin() + 3.0 / (M * L * L) * u;
    let new_theta_dot = (theta_dot + theta_acc * dt).clamp(-MAX_SPEED, MAX_SPEED);
    let new_theta = theta + new_theta_dot * dt;
    ([new_theta, new_theta_dot, 0.0, 0.0], reward)
}
