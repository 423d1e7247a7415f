//! The optimization objective: per-agent processing and transmission
//! cost, and the penalty-gated inverse-cost reward.

use serde::{Deserialize, Serialize};

use crate::env::ImageMeta;
use crate::error::{Error, Result};

/// Guard added to the cost denominator in [`reward`].
pub const REWARD_EPS: f64 = 1e-6;
/// Upper clip applied to rewards for numerical stability.
pub const REWARD_MAX: f64 = 10.0;

/// One agent's cost for one step, split by source.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    /// α × Σ proc_cost over selected images.
    pub processing_cost: f64,
    /// β × power × transmit time (energy, weighted).
    pub transmission_cost: f64,
    /// Sum of the two components.
    pub total: f64,
}

impl CostBreakdown {
    pub fn new(processing_cost: f64, transmission_cost: f64) -> Self {
        CostBreakdown {
            processing_cost,
            transmission_cost,
            total: processing_cost + transmission_cost,
        }
    }
}

/// α-weighted processing cost of the selected images.
pub fn selection_cost(catalog_row: &[ImageMeta], mask: &[bool], alpha: f64) -> f64 {
    debug_assert_eq!(catalog_row.len(), mask.len());
    let mut sum = 0.0;
    for (img, &sel) in catalog_row.iter().zip(mask) {
        if sel {
            sum += img.proc_cost;
        }
    }
    alpha * sum
}

/// β-weighted transmission energy: power × (8 × payload / rate).
///
/// A zero rate means the payload can never complete; the caller is
/// expected to have rejected that state upstream.
pub fn transmission_cost(power_w: f64, rate_bps: f64, payload_bytes: u64, beta: f64) -> Result<f64> {
    if rate_bps <= 0.0 {
        return Err(Error::Domain(format!(
            "transmission cost undefined at rate {rate_bps} bit/s"
        )));
    }
    let tx_time_s = 8.0 * payload_bytes as f64 / rate_bps;
    Ok(beta * power_w * tx_time_s)
}

/// Inverse-cost reward, hard-zeroed on any constraint violation and
/// clipped to `[0, REWARD_MAX]`.
pub fn reward(total_cost: f64, feasible_all: bool, c_ref: f64) -> f64 {
    if !feasible_all {
        return 0.0;
    }
    (c_ref / (total_cost + REWARD_EPS)).clamp(0.0, REWARD_MAX)
}

/// Softened penalty variant: instead of the hard zero, the inverse-cost
/// reward is scaled by exp(−κ · violations) with κ = 2. Off by default;
/// see [`crate::config::ScenarioConfig`] consumers for the flag.
pub fn reward_soft(total_cost: f64, violation_count: usize, c_ref: f64) -> f64 {
    let base = (c_ref / (total_cost + REWARD_EPS)).clamp(0.0, REWARD_MAX);
    base * (-2.0 * violation_count as f64).exp()
}
