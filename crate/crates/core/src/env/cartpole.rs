use rand::{Rng, RngCore};

pub(super) const TAU: f64 = 0.02;
const GRAVITY: f64 = 9.8;
const MASS_CART: f64 = 1.0;
const MASS_POLE: f64 = 0.1;
const TOTAL_MASS: f64 = MASS_CART + MASS_POLE;
// half the pole's length
const LENGTH: f64 = 0.5;
const POLE_MASS_LENGTH: f64 = MASS_POLE * LENGTH;
const FORCE_MAG: f64 = 10.0;
const X_THRESHOLD: f64 = 2.4;
const THETA_THRESHOLD: f64 = 12.0 * std::f64::consts::PI / 180.0;

pub(super) fn initial_state(rng: &mut impl RngCore) -> [f64; 4] {
    let mut s = [0.0; 4];
    for v in s.iter_mut() {
        *v = -0.05 + 0.1 * rng.random::<f64>();
    }
    s
}

/// Explicit Euler step. Returns (next state, reward, terminated).
pub(super) fn dynamics(s: &[f64; 4], push_right: bool) -> ([f64; 4], f64, bool) {
    let [x, x_dot, theta, theta_dot] = *s;
    let force = if push_right { FORCE_MAG } else { -FORCE_MAG };
    let (sin, cos) = theta.sin_cos();
    let temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sin) / TOTAL_MASS;
    let theta_acc = (GRAVITY * sin - cos * temp)
        / (LENGTH * (4.0 / 3.0 - MASS_POLE * cos * cos / TOTAL_MASS));
    let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos / TOTAL_MASS;
    let next = [
        x + TAU * x_dot,
        x_dot + TAU * x_acc,
        theta + TAU * theta_dot,
        theta_dot + TAU * theta_acc,
    ];
    let terminated = next[0].abs() > X_THRESHOLD || next[2].abs() > THETA_THRESHOLD;
    (next, 1.0, terminated)
}
