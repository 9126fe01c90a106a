use crate::error::{Error, Result};

/// Generalized advantage estimation over one trajectory segment.
///
/// `values` has `T + 1` entries; the last is the bootstrap value. A terminal at
/// `t` removes both the bootstrap of `V[t+1]` and the propagation from `t + 1`.
/// Returns `(advantages, returns)` with `returns = advantages + values[..T]`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    terminals: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t_len = rewards.len();
    if t_len == 0 {
        return Err(Error::invalid("gae needs at least one transition"));
    }
    if values.len() != t_len + 1 || terminals.len() != t_len {
        return Err(Error::shape(format!(
            "gae over {t_len} rewards needs {} values and {t_len} terminal flags, got {} and {}",
            t_len + 1,
            values.len(),
            terminals.len()
        )));
    }
    let mut adv = vec![0.0; t_len];
    let mut next = 0.0;
    for t in (0..t_len).rev() {
        let live = if terminals[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * live * values[t + 1] - values[t];
        next = delta + gamma * lambda * live * next;
        adv[t] = next;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}
