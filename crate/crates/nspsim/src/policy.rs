//! Mixture-of-experts actor-critic.
//!
//! Each agent owns two expert networks over disjoint action subspaces: a
//! selection expert emitting one Bernoulli logit per catalog image and a
//! power expert emitting the mean and log-std of a pre-squash Gaussian
//! whose sample maps to `(0, p_max)` through a scaled sigmoid. A central
//! gating network maps the global state to a two-way simplex per agent
//! (used to weight expert loss terms during training) and a central
//! critic maps the global state to one value per agent.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{self, ForwardCache, MlpSpec};
use crate::rng::{derive_seed, Fnv1a, TAG_INIT};

/// Clamp on the power expert's log-std output.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Pre-squash samples are clamped to this magnitude. e^−27 ≈ 1.9e−12, so
/// the squashed power stays at least `p_max × 1e−12` away from both
/// endpoints of `(0, p_max)`.
pub const PRE_SQUASH_CLAMP: f64 = 27.0;

const LN_2PI: f64 = 1.8378770664093453;

/// Architecture of the whole policy bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySpec {
    pub num_agents: usize,
    pub m_images: usize,
    /// Per-agent observation length.
    pub obs_dim: usize,
    pub p_max_w: f64,
    pub expert_hidden: [usize; 2],
    pub gate_hidden: usize,
    pub critic_hidden: [usize; 2],
}

/// Identifies one sub-network inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Selection(usize),
    Power(usize),
    Gate,
    Critic,
}

impl PolicySpec {
    pub fn for_scenario(config: &crate::config::ScenarioConfig) -> Self {
        PolicySpec {
            num_agents: config.num_agents,
            m_images: config.images_per_agent,
            obs_dim: crate::env::AgentObservation::dim(config.images_per_agent),
            p_max_w: config.p_max_w,
            expert_hidden: [64, 64],
            gate_hidden: 32,
            critic_hidden: [64, 64],
        }
    }

    pub fn global_dim(&self) -> usize {
        self.num_agents * self.obs_dim
    }

    pub fn selection_spec(&self) -> MlpSpec {
        MlpSpec::new(&[
            self.obs_dim,
            self.expert_hidden[0],
            self.expert_hidden[1],
            self.m_images,
        ])
        .unwrap()
    }

    pub fn power_spec(&self) -> MlpSpec {
        MlpSpec::new(&[self.obs_dim, self.expert_hidden[0], self.expert_hidden[1], 2]).unwrap()
    }

    pub fn gate_spec(&self) -> MlpSpec {
        MlpSpec::new(&[self.global_dim(), self.gate_hidden, 2 * self.num_agents]).unwrap()
    }

    pub fn critic_spec(&self) -> MlpSpec {
        MlpSpec::new(&[
            self.global_dim(),
            self.critic_hidden[0],
            self.critic_hidden[1],
            self.num_agents,
        ])
        .unwrap()
    }

    /// Segments in flat-vector order.
    pub fn segments(&self) -> Vec<Segment> {
        let mut segs = Vec::with_capacity(2 * self.num_agents + 2);
        for agent in 0..self.num_agents {
            segs.push(Segment::Selection(agent));
        }
        for agent in 0..self.num_agents {
            segs.push(Segment::Power(agent));
        }
        segs.push(Segment::Gate);
        segs.push(Segment::Critic);
        segs
    }

    pub fn segment_spec(&self, seg: Segment) -> MlpSpec {
        match seg {
            Segment::Selection(_) => self.selection_spec(),
            Segment::Power(_) => self.power_spec(),
            Segment::Gate => self.gate_spec(),
            Segment::Critic => self.critic_spec(),
        }
    }

    pub fn segment_range(&self, seg: Segment) -> std::ops::Range<usize> {
        let mut off = 0;
        for s in self.segments() {
            let count = self.segment_spec(s).param_count();
            if s == seg {
                return off..off + count;
            }
            off += count;
        }
        unreachable!("segment not in layout");
    }

    pub fn param_count(&self) -> usize {
        self.segments()
            .into_iter()
            .map(|s| self.segment_spec(s).param_count())
            .sum()
    }

    /// Human-readable owner of a flat parameter index.
    pub fn describe_index(&self, index: usize) -> String {
        for seg in self.segments() {
            let range = self.segment_range(seg);
            if range.contains(&index) {
                let inner = self.segment_spec(seg).describe_index(index - range.start);
                let name = match seg {
                    Segment::Selection(a) => format!("selection expert {a}"),
                    Segment::Power(a) => format!("power expert {a}"),
                    Segment::Gate => "gate".to_string(),
                    Segment::Critic => "critic".to_string(),
                };
                return format!("{name} {inner}");
            }
        }
        format!("index {index} out of bounds")
    }

    /// Stable hash of the full architecture.
    pub fn stable_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write_u64(self.num_agents as u64);
        h.write_u64(self.m_images as u64);
        h.write_u64(self.obs_dim as u64);
        h.write_f64(self.p_max_w);
        for seg in self.segments() {
            h.write_u64(self.segment_spec(seg).stable_hash());
        }
        h.finish()
    }
}

/// All sub-network weights in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParameters {
    pub spec: PolicySpec,
    pub flat: Vec<f64>,
}

impl PolicyParameters {
    /// Glorot init of every sub-network, deterministic per seed.
    pub fn init(spec: PolicySpec, seed: u64) -> Self {
        let mut flat = vec![0.0; spec.param_count()];
        for (k, seg) in spec.segments().into_iter().enumerate() {
            let sub = spec.segment_spec(seg);
            let sub_params = nn::init_params(&sub, derive_seed(seed, TAG_INIT, k as u64));
            flat[spec.segment_range(seg)].copy_from_slice(&sub_params.data);
        }
        PolicyParameters { spec, flat }
    }

    pub fn segment(&self, seg: Segment) -> &[f64] {
        &self.flat[self.spec.segment_range(seg)]
    }

    /// Checkpoint bytes binding the architecture and scenario hashes.
    pub fn to_bytes(&self, scenario_hash: u64) -> Vec<u8> {
        nn::serialize_params(combined_hash(&self.spec, scenario_hash), &self.flat)
    }

    pub fn from_bytes(spec: PolicySpec, scenario_hash: u64, bytes: &[u8]) -> Result<Self> {
        let flat = nn::deserialize_params(bytes, combined_hash(&spec, scenario_hash))?;
        if flat.len() != spec.param_count() {
            return Err(Error::Format(format!(
                "checkpoint carries {} parameters, spec needs {}",
                flat.len(),
                spec.param_count()
            )));
        }
        Ok(PolicyParameters { spec, flat })
    }
}

fn combined_hash(spec: &PolicySpec, scenario_hash: u64) -> u64 {
    let mut h = Fnv1a::new();
    h.write_u64(spec.stable_hash());
    h.write_u64(scenario_hash);
    h.finish()
}

/// One sampled (or deterministic) per-agent action with the quantities
/// PPO needs later.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionRecord {
    pub selection: Vec<bool>,
    /// Pre-squash power variable.
    pub power_u: f64,
    /// Realized power, `p_max × sigmoid(power_u)`.
    pub power_w: f64,
    pub log_prob_sel: f64,
    pub log_prob_pow: f64,
    pub entropy_sel: f64,
    pub entropy_pow: f64,
}

/// Bernoulli selection log-probability: Σ x·log σ(l) + (1−x)·log(1−σ(l)).
pub fn sel_log_prob(logits: &[f64], bits: &[bool]) -> f64 {
    logits
        .iter()
        .zip(bits)
        .map(|(&l, &x)| if x { -nn::softplus(-l) } else { -nn::softplus(l) })
        .sum()
}

/// Sum of per-bit Bernoulli entropies: Σ softplus(l) − l·σ(l).
pub fn sel_entropy(logits: &[f64]) -> f64 {
    logits
        .iter()
        .map(|&l| nn::softplus(l) - l * nn::sigmoid(l))
        .sum()
}

/// d log π_sel / d logit_i = x_i − σ(l_i).
pub fn sel_log_prob_grad(logits: &[f64], bits: &[bool]) -> Vec<f64> {
    logits
        .iter()
        .zip(bits)
        .map(|(&l, &x)| (x as u8 as f64) - nn::sigmoid(l))
        .collect()
}

/// d H_sel / d logit_i = −l_i σ(l_i)(1 − σ(l_i)).
pub fn sel_entropy_grad(logits: &[f64]) -> Vec<f64> {
    logits
        .iter()
        .map(|&l| {
            let s = nn::sigmoid(l);
            -l * s * (1.0 - s)
        })
        .collect()
}

/// Gaussian log-density of the stored pre-squash sample minus the
/// sigmoid-squash Jacobian log-determinant.
pub fn pow_log_prob(mean: f64, log_std: f64, u: f64, p_max: f64) -> f64 {
    let std = log_std.exp();
    let z = (u - mean) / std;
    let gauss = -0.5 * z * z - log_std - 0.5 * LN_2PI;
    gauss - p_max.ln() + nn::softplus(u) + nn::softplus(-u)
}

/// Entropy of the pre-squash Gaussian.
pub fn pow_entropy(log_std: f64) -> f64 {
    0.5 * (LN_2PI + 1.0) + log_std
}

/// Simplex weights per agent from raw gate logits (pairs in agent order).
pub fn gate_weights_from_logits(logits: &[f64], num_agents: usize) -> Vec<[f64; 2]> {
    debug_assert_eq!(logits.len(), 2 * num_agents);
    (0..num_agents)
        .map(|a| {
            let z0 = logits[2 * a];
            let z1 = logits[2 * a + 1];
            let m = z0.max(z1);
            let e0 = (z0 - m).exp();
            let e1 = (z1 - m).exp();
            let sum = e0 + e1;
            [e0 / sum, e1 / sum]
        })
        .collect()
}

/// Forward pass of one agent's selection expert.
pub fn sel_forward(
    params: &PolicyParameters,
    agent: usize,
    obs: &[f64],
) -> Result<(Vec<f64>, ForwardCache)> {
    nn::forward(
        &params.spec.selection_spec(),
        params.segment(Segment::Selection(agent)),
        obs,
    )
}

/// Forward pass of one agent's power expert, returning `(mean, raw log-std)`
/// before clamping.
pub fn pow_forward(
    params: &PolicyParameters,
    agent: usize,
    obs: &[f64],
) -> Result<((f64, f64), ForwardCache)> {
    let (out, cache) = nn::forward(
        &params.spec.power_spec(),
        params.segment(Segment::Power(agent)),
        obs,
    )?;
    Ok(((out[0], out[1]), cache))
}

pub fn gate_forward(params: &PolicyParameters, global_state: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    nn::forward(&params.spec.gate_spec(), params.segment(Segment::Gate), global_state)
}

pub fn critic_forward(
    params: &PolicyParameters,
    global_state: &[f64],
) -> Result<(Vec<f64>, ForwardCache)> {
    nn::forward(&params.spec.critic_spec(), params.segment(Segment::Critic), global_state)
}

/// Samples (or deterministically picks) one agent's action.
///
/// Selection bits are independent Bernoulli(σ(logit)); deterministic mode
/// thresholds at zero with ties resolved to 1. The power sample squashes
/// a clamped Gaussian draw through `p_max·sigmoid`.
pub fn act(
    params: &PolicyParameters,
    agent: usize,
    obs: &[f64],
    rng: &mut ChaCha12Rng,
    deterministic: bool,
) -> Result<ActionRecord> {
    let (logits, _) = sel_forward(params, agent, obs)?;
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::Numeric(format!(
            "selection expert {agent} produced non-finite logits"
        )));
    }
    let bits: Vec<bool> = if deterministic {
        logits.iter().map(|&l| l >= 0.0).collect()
    } else {
        logits
            .iter()
            .map(|&l| rng.random_bool(nn::sigmoid(l).clamp(0.0, 1.0)))
            .collect()
    };

    let ((mean, raw_log_std), _) = pow_forward(params, agent, obs)?;
    if !mean.is_finite() || !raw_log_std.is_finite() {
        return Err(Error::Numeric(format!(
            "power expert {agent} produced non-finite outputs"
        )));
    }
    let log_std = raw_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX);
    let u = if deterministic {
        mean
    } else {
        let z: f64 = StandardNormal.sample(rng);
        mean + log_std.exp() * z
    };
    let u = u.clamp(-PRE_SQUASH_CLAMP, PRE_SQUASH_CLAMP);
    let power_w = params.spec.p_max_w * nn::sigmoid(u);

    Ok(ActionRecord {
        log_prob_sel: sel_log_prob(&logits, &bits),
        log_prob_pow: pow_log_prob(mean, log_std, u, params.spec.p_max_w),
        entropy_sel: sel_entropy(&logits),
        entropy_pow: pow_entropy(log_std),
        selection: bits,
        power_u: u,
        power_w,
    })
}

/// Recomputes `(log π_sel, log π_pow, H_sel, H_pow)` of a stored action
/// under the current parameters.
pub fn log_prob_and_entropy(
    params: &PolicyParameters,
    agent: usize,
    obs: &[f64],
    action: &ActionRecord,
) -> Result<(f64, f64, f64, f64)> {
    if !(action.power_w > 0.0 && action.power_w < params.spec.p_max_w) {
        return Err(Error::Domain(format!(
            "action power {} outside (0, {})",
            action.power_w, params.spec.p_max_w
        )));
    }
    let (logits, _) = sel_forward(params, agent, obs)?;
    let ((mean, raw_log_std), _) = pow_forward(params, agent, obs)?;
    let log_std = raw_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX);
    Ok((
        sel_log_prob(&logits, &action.selection),
        pow_log_prob(mean, log_std, action.power_u, params.spec.p_max_w),
        sel_entropy(&logits),
        pow_entropy(log_std),
    ))
}

/// Per-agent two-way simplex over experts from the global state.
pub fn gate_weights(params: &PolicyParameters, global_state: &[f64]) -> Result<Vec<[f64; 2]>> {
    let (logits, _) = gate_forward(params, global_state)?;
    Ok(gate_weights_from_logits(&logits, params.spec.num_agents))
}

/// Centralized critic: one value per agent from the global state.
pub fn value(params: &PolicyParameters, global_state: &[f64]) -> Result<Vec<f64>> {
    Ok(critic_forward(params, global_state)?.0)
}
