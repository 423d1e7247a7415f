use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Full parameterization of a simulated deployment: agents, channel,
/// costs, and constraint thresholds.
///
/// A config plus its `seed` fully determines every sampled quantity in the
/// scenario (image catalog, agent positions, fading draws).
///
/// Observation features derived from channel quantities are log-scaled and
/// then min-max normalized with fixed constants; see [`crate::env`] for the
/// exact mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Number of transmitter agents, N ≥ 1.
    pub num_agents: usize,
    /// Candidate images per agent, M ≥ 1.
    pub images_per_agent: usize,
    /// Steps per episode, T ≥ 1.
    pub horizon: usize,
    /// Channel bandwidth in Hz.
    pub bandwidth_hz: f64,
    /// Receiver noise power in watts.
    pub noise_power_w: f64,
    /// Maximum transmit power per agent in watts.
    pub p_max_w: f64,
    /// Minimum number of images each agent must select.
    pub min_images: usize,
    /// Minimum aggregate quality contribution of the selected images.
    pub q_min: f64,
    /// Minimum required data rate in bit/s.
    pub r_min_bps: f64,
    /// Size of the transmitted point-cloud payload in bytes.
    pub payload_bytes: u64,
    /// Inclusive [lo, hi] range of candidate image sizes in bytes.
    pub image_bytes_range: [u64; 2],
    /// Path-loss exponent η.
    pub pathloss_exponent: f64,
    /// Reference channel gain g0 at 1 m.
    pub reference_gain: f64,
    /// Radius of the disc the transmitters are placed in, meters.
    pub cell_radius_m: f64,
    /// Resample unit-mean Rayleigh power fades on every step.
    pub fading: bool,
    /// Replace the hard zero-on-violation reward with exp(−2·violations)
    /// scaling. Off by default.
    pub soft_penalty: bool,
    /// Cost weight per processing unit.
    pub alpha: f64,
    /// Cost weight per joule of transmission energy.
    pub beta: f64,
    /// Processing cost units per megabyte of selected image data.
    pub proc_cost_per_mb: f64,
    /// Master seed for all scenario-level sampling.
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            num_agents: 3,
            images_per_agent: 8,
            horizon: 8,
            bandwidth_hz: 1e6,
            noise_power_w: 1e-9,
            p_max_w: 20.0,
            min_images: 3,
            q_min: 3.0,
            r_min_bps: 250_000.0,
            payload_bytes: 7_000_000,
            image_bytes_range: [3_000_000, 7_000_000],
            pathloss_exponent: 3.0,
            reference_gain: 0.02,
            cell_radius_m: 500.0,
            fading: false,
            soft_penalty: false,
            alpha: 1.0,
            beta: 0.02,
            proc_cost_per_mb: 1.0,
            seed: 1,
        }
    }
}

impl ScenarioConfig {
    /// Checks every documented invariant, returning a config error naming
    /// the first offending field.
    pub fn validate(&self) -> Result<()> {
        fn positive(field: &'static str, v: f64) -> Result<()> {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config {
                    field,
                    reason: format!("must be strictly positive and finite, got {v}"),
                })
            }
        }
        if self.num_agents == 0 {
            return Err(Error::Config {
                field: "num_agents",
                reason: "must be at least 1".into(),
            });
        }
        if self.images_per_agent == 0 {
            return Err(Error::Config {
                field: "images_per_agent",
                reason: "must be at least 1".into(),
            });
        }
        if self.horizon == 0 {
            return Err(Error::Config {
                field: "horizon",
                reason: "must be at least 1".into(),
            });
        }
        positive("bandwidth_hz", self.bandwidth_hz)?;
        positive("noise_power_w", self.noise_power_w)?;
        positive("p_max_w", self.p_max_w)?;
        positive("r_min_bps", self.r_min_bps)?;
        positive("pathloss_exponent", self.pathloss_exponent)?;
        positive("reference_gain", self.reference_gain)?;
        positive("cell_radius_m", self.cell_radius_m)?;
        // alpha and beta are weights and may legitimately be zero
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config {
                field: "alpha",
                reason: format!("must be finite and non-negative, got {}", self.alpha),
            });
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(Error::Config {
                field: "beta",
                reason: format!("must be finite and non-negative, got {}", self.beta),
            });
        }
        positive("proc_cost_per_mb", self.proc_cost_per_mb)?;
        if !self.q_min.is_finite() || self.q_min < 0.0 {
            return Err(Error::Config {
                field: "q_min",
                reason: format!("must be finite and non-negative, got {}", self.q_min),
            });
        }
        if self.payload_bytes == 0 {
            return Err(Error::Config {
                field: "payload_bytes",
                reason: "must be strictly positive".into(),
            });
        }
        if self.min_images > self.images_per_agent {
            return Err(Error::Config {
                field: "min_images",
                reason: format!(
                    "min_images ({}) exceeds images_per_agent ({})",
                    self.min_images, self.images_per_agent
                ),
            });
        }
        if self.image_bytes_range[0] == 0 {
            return Err(Error::Config {
                field: "image_bytes_range",
                reason: "lower bound must be strictly positive".into(),
            });
        }
        if self.image_bytes_range[0] > self.image_bytes_range[1] {
            return Err(Error::Config {
                field: "image_bytes_range",
                reason: format!(
                    "lower bound {} exceeds upper bound {}",
                    self.image_bytes_range[0], self.image_bytes_range[1]
                ),
            });
        }
        Ok(())
    }

    /// Stable 64-bit hash over every field, platform-independent.
    ///
    /// Used to bind checkpoints to the scenario they were trained on.
    pub fn stable_hash(&self) -> u64 {
        let mut h = crate::rng::Fnv1a::new();
        h.write_u64(self.num_agents as u64);
        h.write_u64(self.images_per_agent as u64);
        h.write_u64(self.horizon as u64);
        h.write_f64(self.bandwidth_hz);
        h.write_f64(self.noise_power_w);
        h.write_f64(self.p_max_w);
        h.write_u64(self.min_images as u64);
        h.write_f64(self.q_min);
        h.write_f64(self.r_min_bps);
        h.write_u64(self.payload_bytes);
        h.write_u64(self.image_bytes_range[0]);
        h.write_u64(self.image_bytes_range[1]);
        h.write_f64(self.pathloss_exponent);
        h.write_f64(self.reference_gain);
        h.write_f64(self.cell_radius_m);
        h.write_u64(self.fading as u64);
        h.write_u64(self.soft_penalty as u64);
        h.write_f64(self.alpha);
        h.write_f64(self.beta);
        h.write_f64(self.proc_cost_per_mb);
        h.write_u64(self.seed);
        h.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ScenarioConfig::default().validate().unwrap();
    }

    #[test]
    fn min_images_above_catalog_size_is_rejected() {
        let cfg = ScenarioConfig {
            min_images: 9,
            images_per_agent: 8,
            ..ScenarioConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        match err {
            Error::Config { field, .. } => assert_eq!(field, "min_images"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn nonpositive_quantities_are_rejected() {
        let cfg = ScenarioConfig {
            bandwidth_hz: 0.0,
            ..ScenarioConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ScenarioConfig {
            noise_power_w: -1e-9,
            ..ScenarioConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn inverted_image_size_range_is_rejected() {
        let cfg = ScenarioConfig {
            image_bytes_range: [7_000_000, 3_000_000],
            ..ScenarioConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("image_bytes_range"));
    }

    #[test]
    fn hash_changes_with_any_field() {
        let base = ScenarioConfig::default();
        let mut other = base.clone();
        other.seed = 2;
        assert_ne!(base.stable_hash(), other.stable_hash());
        let mut other = base.clone();
        other.beta += 1e-9;
        assert_ne!(base.stable_hash(), other.stable_hash());
    }
}
