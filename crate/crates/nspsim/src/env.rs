//! Deterministic, seed-driven simulation of the multi-agent wireless
//! environment: image catalogs, channel gains, SINR, rates, constraint
//! checking, and episode stepping.
//!
//! Geometry: transmitters are placed uniformly in a disc of
//! `cell_radius_m` around a common receiver site (one receive chain per
//! agent, co-located). Path loss is `g0 · d^(−η)` with distances clamped
//! to at least 1 m; when fading is enabled every transmitter→receiver
//! link gets an independent unit-mean Rayleigh power fade, resampled each
//! step. Path loss is fixed for the lifetime of a scenario.
//!
//! Observation features derived from channel quantities use
//! `log10(x + 1e−12)` followed by fixed min-max normalization:
//! SINR maps `[−12, 6] → [0, 1]` (divide by 18 after shifting by 12);
//! gains and interference powers map `[−12, 0] → [0, 1]` (divide by 12).

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::config::ScenarioConfig;
use crate::cost::{self, CostBreakdown};
use crate::error::{Error, Result};
use crate::rng::{stream, TAG_FADING, TAG_SCENARIO};

/// Image qualities are sampled uniformly from this fixed range.
pub const QUALITY_RANGE: [f64; 2] = [0.5, 1.5];
/// Floor added before log-scaling observation features.
pub const LOG_FLOOR: f64 = 1e-12;
/// Minimum transmitter distance from the receiver site, meters.
pub const MIN_DISTANCE_M: f64 = 1.0;

/// Attributes of one candidate image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub size_bytes: u64,
    /// Contribution to 3D reconstruction quality, in `QUALITY_RANGE`.
    pub quality: f64,
    /// Processing cost units: `proc_cost_per_mb × size_bytes / 1e6`.
    pub proc_cost: f64,
}

/// Channel gains for one step. `cross_gain[m][n]` is the gain from
/// transmitter `m` at receiver `n`; the diagonal equals `direct_gain`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelState {
    pub direct_gain: Vec<f64>,
    pub cross_gain: Vec<Vec<f64>>,
}

impl ChannelState {
    /// Number of agents.
    pub fn len(&self) -> usize {
        self.direct_gain.len()
    }

    pub fn is_empty(&self) -> bool {
        self.direct_gain.is_empty()
    }
}

/// Joint decision of all agents for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct JointAction {
    /// Per-agent selection mask over the image catalog.
    pub selection: Vec<Vec<bool>>,
    /// Per-agent transmit power, strictly in `(0, p_max_w]` by
    /// parameterization.
    pub power_w: Vec<f64>,
}

/// Per-agent feasibility of the four constraint families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeasibilityFlags {
    pub power_ok: bool,
    pub count_ok: bool,
    pub quality_ok: bool,
    pub qos_ok: bool,
}

impl FeasibilityFlags {
    pub fn all(&self) -> bool {
        self.power_ok && self.count_ok && self.quality_ok && self.qos_ok
    }

    pub fn violations(&self) -> usize {
        [self.power_ok, self.count_ok, self.quality_ok, self.qos_ok]
            .iter()
            .filter(|ok| !**ok)
            .count()
    }
}

/// Normalized local view of one agent; length `m_images + 5`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentObservation {
    pub features: Vec<f64>,
}

impl AgentObservation {
    pub fn dim(m_images: usize) -> usize {
        m_images + 5
    }
}

/// Physics and cost evaluation of one joint action, shared by the
/// episode stepper, the baselines, and the brute-force oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEvaluation {
    pub sinr: Vec<f64>,
    pub rate_bps: Vec<f64>,
    pub tx_time_s: Vec<f64>,
    pub cost: Vec<CostBreakdown>,
    pub feasible: Vec<FeasibilityFlags>,
}

impl JointEvaluation {
    pub fn total_cost(&self) -> f64 {
        self.cost.iter().map(|c| c.total).sum()
    }

    pub fn all_feasible(&self) -> bool {
        self.feasible.iter().all(|f| f.all())
    }
}

/// Everything produced by one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub sinr: Vec<f64>,
    pub rate_bps: Vec<f64>,
    pub tx_time_s: Vec<f64>,
    pub cost: Vec<CostBreakdown>,
    pub feasible: Vec<FeasibilityFlags>,
    pub reward: Vec<f64>,
    pub next_obs: Vec<AgentObservation>,
    pub done: bool,
}

/// γ_n = p_n g_{n,n} / (noise + Σ_{m≠n} p_m g_{m,n}).
pub fn compute_sinr(channel: &ChannelState, power_w: &[f64], noise_power_w: f64) -> Result<Vec<f64>> {
    let n = channel.len();
    if power_w.len() != n {
        return Err(Error::Shape(format!(
            "power vector length {} does not match {} agents",
            power_w.len(),
            n
        )));
    }
    if let Some(p) = power_w.iter().find(|p| **p <= 0.0 || !p.is_finite()) {
        return Err(Error::Domain(format!("transmit power must be positive, got {p}")));
    }
    let mut sinr = Vec::with_capacity(n);
    for rx in 0..n {
        let mut interference = 0.0;
        for tx in 0..n {
            if tx != rx {
                interference += power_w[tx] * channel.cross_gain[tx][rx];
            }
        }
        sinr.push(power_w[rx] * channel.direct_gain[rx] / (noise_power_w + interference));
    }
    Ok(sinr)
}

/// Shannon rate `R = B log2(1 + γ)` elementwise.
pub fn compute_rate(sinr: &[f64], bandwidth_hz: f64) -> Result<Vec<f64>> {
    if let Some(g) = sinr.iter().find(|g| **g < 0.0) {
        return Err(Error::Domain(format!("SINR must be non-negative, got {g}")));
    }
    Ok(sinr.iter().map(|g| bandwidth_hz * g.ln_1p() / std::f64::consts::LN_2).collect())
}

/// Aggregate interference power seen at each receiver.
pub fn received_interference(channel: &ChannelState, power_w: &[f64]) -> Vec<f64> {
    let n = channel.len();
    (0..n)
        .map(|rx| {
            (0..n)
                .filter(|&tx| tx != rx)
                .map(|tx| power_w[tx] * channel.cross_gain[tx][rx])
                .sum()
        })
        .collect()
}

/// Checks the four per-agent constraint families against an evaluated
/// outcome. The QoS inequality is closed: a rate exactly at `r_min_bps`
/// is feasible.
pub fn check_feasibility(
    action: &JointAction,
    catalog: &[Vec<ImageMeta>],
    rate_bps: &[f64],
    config: &ScenarioConfig,
) -> Vec<FeasibilityFlags> {
    let mut flags = Vec::with_capacity(action.power_w.len());
    for agent in 0..action.power_w.len() {
        let mask = &action.selection[agent];
        let count = mask.iter().filter(|&&s| s).count();
        let quality: f64 = catalog[agent]
            .iter()
            .zip(mask)
            .filter(|(_, &s)| s)
            .map(|(img, _)| img.quality)
            .sum();
        let p = action.power_w[agent];
        flags.push(FeasibilityFlags {
            power_ok: p > 0.0 && p <= config.p_max_w,
            count_ok: count >= config.min_images,
            quality_ok: quality >= config.q_min,
            qos_ok: rate_bps[agent] >= config.r_min_bps,
        });
    }
    flags
}

/// Evaluates one joint action against a channel: SINR, rates, transmit
/// times, cost breakdowns, and feasibility. Pure; every consumer of the
/// cost model funnels through here.
pub fn evaluate_joint(
    action: &JointAction,
    channel: &ChannelState,
    catalog: &[Vec<ImageMeta>],
    config: &ScenarioConfig,
) -> Result<JointEvaluation> {
    let n = channel.len();
    if action.selection.len() != n || action.power_w.len() != n {
        return Err(Error::Shape(format!(
            "action is sized for {} agents, channel for {n}",
            action.power_w.len()
        )));
    }
    for (agent, mask) in action.selection.iter().enumerate() {
        if mask.len() != config.images_per_agent {
            return Err(Error::Shape(format!(
                "agent {agent} selection mask has {} entries, catalog has {}",
                mask.len(),
                config.images_per_agent
            )));
        }
    }
    let sinr = compute_sinr(channel, &action.power_w, config.noise_power_w)?;
    let rate_bps = compute_rate(&sinr, config.bandwidth_hz)?;
    let tx_time_s: Vec<f64> = rate_bps
        .iter()
        .map(|r| 8.0 * config.payload_bytes as f64 / r)
        .collect();
    let mut costs = Vec::with_capacity(n);
    for agent in 0..n {
        let processing = cost::selection_cost(&catalog[agent], &action.selection[agent], config.alpha);
        let transmission = cost::transmission_cost(
            action.power_w[agent],
            rate_bps[agent],
            config.payload_bytes,
            config.beta,
        )?;
        costs.push(CostBreakdown::new(processing, transmission));
    }
    let feasible = check_feasibility(action, catalog, &rate_bps, config);
    Ok(JointEvaluation {
        sinr,
        rate_bps,
        tx_time_s,
        cost: costs,
        feasible,
    })
}

/// A fully sampled deployment: catalog, geometry, and path-loss gains.
/// Immutable once built; episodes only vary fading and agent behavior.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    /// N×M image attributes.
    pub catalog: Vec<Vec<ImageMeta>>,
    /// Transmitter distances from the receiver site, meters.
    pub distances_m: Vec<f64>,
    /// Path-loss gain per transmitter (no fading applied).
    pub base_gain: Vec<f64>,
}

impl Scenario {
    /// Samples catalog and geometry from `config.seed`.
    pub fn new(config: &ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, TAG_SCENARIO, 0);
        let n = config.num_agents;
        let m = config.images_per_agent;

        let mut distances_m = Vec::with_capacity(n);
        let mut base_gain = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random();
            let _theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let d = (config.cell_radius_m * u.sqrt()).max(MIN_DISTANCE_M);
            distances_m.push(d);
            base_gain.push(config.reference_gain * d.powf(-config.pathloss_exponent));
        }

        let mut catalog = Vec::with_capacity(n);
        for _ in 0..n {
            let mut row = Vec::with_capacity(m);
            for _ in 0..m {
                let size_bytes =
                    rng.random_range(config.image_bytes_range[0]..=config.image_bytes_range[1]);
                let quality = rng.random_range(QUALITY_RANGE[0]..QUALITY_RANGE[1]);
                let proc_cost = config.proc_cost_per_mb * size_bytes as f64 / 1e6;
                row.push(ImageMeta {
                    size_bytes,
                    quality,
                    proc_cost,
                });
            }
            catalog.push(row);
        }

        Ok(Scenario {
            config: config.clone(),
            catalog,
            distances_m,
            base_gain,
        })
    }

    /// Channel with no fading applied: `cross[m][n] = base_gain[m]`.
    pub fn base_channel(&self) -> ChannelState {
        let n = self.config.num_agents;
        ChannelState {
            direct_gain: self.base_gain.clone(),
            cross_gain: (0..n)
                .map(|tx| vec![self.base_gain[tx]; n])
                .collect(),
        }
    }

    /// An environment bound to this scenario with the given reward
    /// reference cost.
    pub fn env(&self, reward_ref: f64) -> Env<'_> {
        Env::new(self, reward_ref)
    }
}

/// Mutable per-episode simulation state. One instance per worker; all
/// randomness comes from streams derived from `(seed, episode_index)`.
#[derive(Debug, Clone)]
pub struct Env<'a> {
    pub scenario: &'a Scenario,
    /// Reference cost anchoring the inverse-cost reward.
    pub reward_ref: f64,
    episode_index: u64,
    step_index: usize,
    done: bool,
    channel: ChannelState,
    fade_rng: ChaCha12Rng,
    prev_selection: Vec<Vec<bool>>,
    prev_power: Vec<f64>,
    prev_sinr: Vec<f64>,
    prev_interference: Vec<f64>,
}

impl<'a> Env<'a> {
    pub fn new(scenario: &'a Scenario, reward_ref: f64) -> Self {
        let n = scenario.config.num_agents;
        let m = scenario.config.images_per_agent;
        let mut env = Env {
            scenario,
            reward_ref,
            episode_index: 0,
            step_index: 0,
            done: true,
            channel: scenario.base_channel(),
            fade_rng: stream(scenario.config.seed, TAG_FADING, 0),
            prev_selection: vec![vec![false; m]; n],
            prev_power: vec![0.0; n],
            prev_sinr: vec![0.0; n],
            prev_interference: vec![0.0; n],
        };
        env.reset(0);
        env
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.scenario.config
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn channel(&self) -> &ChannelState {
        &self.channel
    }

    /// Starts episode `episode_index`, returning the initial observations.
    /// Previous-action features are zero and SINR/interference features sit
    /// at the log floor.
    pub fn reset(&mut self, episode_index: u64) -> Vec<AgentObservation> {
        let cfg = &self.scenario.config;
        self.episode_index = episode_index;
        self.step_index = 0;
        self.done = false;
        self.fade_rng = stream(cfg.seed, TAG_FADING, episode_index);
        self.channel = self.scenario.base_channel();
        if cfg.fading {
            self.apply_fading();
        }
        for mask in &mut self.prev_selection {
            mask.fill(false);
        }
        self.prev_power.fill(0.0);
        self.prev_sinr.fill(0.0);
        self.prev_interference.fill(0.0);
        self.observations()
    }

    fn apply_fading(&mut self) {
        let n = self.scenario.config.num_agents;
        for tx in 0..n {
            for rx in 0..n {
                let fade: f64 = Exp1.sample(&mut self.fade_rng);
                self.channel.cross_gain[tx][rx] = self.scenario.base_gain[tx] * fade;
            }
        }
        for rx in 0..n {
            self.channel.direct_gain[rx] = self.channel.cross_gain[rx][rx];
        }
    }

    fn log_feature(x: f64, shift: f64, scale: f64) -> f64 {
        ((x + LOG_FLOOR).log10() + shift) / scale
    }

    fn observations(&self) -> Vec<AgentObservation> {
        let cfg = &self.scenario.config;
        let m = cfg.images_per_agent;
        let t_frac = self.step_index as f64 / cfg.horizon as f64;
        (0..cfg.num_agents)
            .map(|agent| {
                let mut features = Vec::with_capacity(AgentObservation::dim(m));
                for &bit in &self.prev_selection[agent] {
                    features.push(if bit { 1.0 } else { 0.0 });
                }
                features.push(self.prev_power[agent] / cfg.p_max_w);
                features.push(Self::log_feature(self.prev_sinr[agent], 12.0, 18.0));
                features.push(Self::log_feature(self.channel.direct_gain[agent], 12.0, 12.0));
                features.push(Self::log_feature(self.prev_interference[agent], 12.0, 12.0));
                features.push(t_frac);
                AgentObservation { features }
            })
            .collect()
    }

    /// Concatenated per-agent observations, the critic/gate input.
    pub fn global_state(obs: &[AgentObservation]) -> Vec<f64> {
        let mut out = Vec::with_capacity(obs.iter().map(|o| o.features.len()).sum());
        for o in obs {
            out.extend_from_slice(&o.features);
        }
        out
    }

    /// Advances one step: SINR → rate → cost → feasibility → reward,
    /// then resamples fading (if enabled) and builds next observations.
    pub fn step(&mut self, action: &JointAction) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::State(format!(
                "step called after episode {} finished",
                self.episode_index
            )));
        }
        let cfg = &self.scenario.config;
        let eval = evaluate_joint(action, &self.channel, &self.scenario.catalog, cfg)?;

        // Cooperative cost, individual gate: the objective is the total
        // operating cost, so the reward denominator is the mean per-agent
        // cost of the whole step — a per-agent denominator leaves the
        // interference externality unpriced (own energy is nearly flat in
        // own power at low SINR, so nothing pushes powers down). The
        // penalty gate stays per-agent; gating everyone on joint
        // feasibility starves learning in near-far geometries where the
        // all-feasible event is rare under exploration.
        let shared_cost = eval.total_cost() / cfg.num_agents as f64;
        let reward: Vec<f64> = eval
            .feasible
            .iter()
            .map(|f| {
                if cfg.soft_penalty {
                    cost::reward_soft(shared_cost, f.violations(), self.reward_ref)
                } else {
                    cost::reward(shared_cost, f.all(), self.reward_ref)
                }
            })
            .collect();

        self.prev_interference = received_interference(&self.channel, &action.power_w);
        self.prev_sinr = eval.sinr.clone();
        self.prev_power = action.power_w.clone();
        for (dst, src) in self.prev_selection.iter_mut().zip(&action.selection) {
            dst.copy_from_slice(src);
        }

        self.step_index += 1;
        self.done = self.step_index >= cfg.horizon;
        if cfg.fading && !self.done {
            self.apply_fading();
        }

        Ok(StepOutcome {
            sinr: eval.sinr,
            rate_bps: eval.rate_bps,
            tx_time_s: eval.tx_time_s,
            cost: eval.cost,
            feasible: eval.feasible,
            reward,
            next_obs: self.observations(),
            done: self.done,
        })
    }
}
