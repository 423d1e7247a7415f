//! Generalized advantage estimation and per-timestep advantage
//! max-propagation across agents.

use crate::error::{Error, Result};

/// Backward-recursive GAE.
///
/// `values` carries one bootstrap entry beyond the trajectory (zero at a
/// terminal). Returns `(advantages, returns)` with
/// `returns[t] = advantages[t] + values[t]`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let t_len = rewards.len();
    if values.len() != t_len + 1 {
        return Err(Error::Shape(format!(
            "values length {} must be rewards length {} plus one bootstrap entry",
            values.len(),
            t_len
        )));
    }
    if dones.len() != t_len {
        return Err(Error::Shape(format!(
            "dones length {} does not match rewards length {}",
            dones.len(),
            t_len
        )));
    }
    let mut advantages = vec![0.0; t_len];
    let mut carry = 0.0;
    for t in (0..t_len).rev() {
        let cont = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * cont * values[t + 1] - values[t];
        carry = delta + gamma * lambda * cont * carry;
        advantages[t] = carry;
    }
    let returns = advantages
        .iter()
        .zip(values)
        .map(|(a, v)| a + v)
        .collect();
    Ok((advantages, returns))
}

/// Replaces every agent's advantage at each timestep with the maximum
/// across agents at that timestep.
pub fn max_propagate(advantages: &[Vec<f64>]) -> Vec<Vec<f64>> {
    if advantages.is_empty() {
        return Vec::new();
    }
    let t_len = advantages[0].len();
    debug_assert!(advantages.iter().all(|row| row.len() == t_len));
    let mut maxed = vec![0.0; t_len];
    for (t, slot) in maxed.iter_mut().enumerate() {
        *slot = advantages
            .iter()
            .map(|row| row[t])
            .fold(f64::NEG_INFINITY, f64::max);
    }
    vec![maxed; advantages.len()]
}
