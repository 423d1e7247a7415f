//! Simulator and trainer for multi-agent 3D content delivery.
//!
//! A set of network service provider agents repeatedly choose image
//! subsets (feeding 3D object generation) and transmit powers (delivering
//! the resulting point clouds) over a shared interference channel. The
//! objective is total operating cost — processing plus transmission
//! energy — under power, selection-count, quality, and rate constraints.
//!
//! The crate provides:
//! - a deterministic, seed-driven environment ([`env`], [`cost`]),
//! - a from-scratch dense-network substrate ([`nn`]),
//! - a mixture-of-experts actor-critic policy ([`policy`]),
//! - a PPO trainer with per-timestep advantage max-propagation ([`trainer`]),
//! - non-learning baselines and a brute-force oracle ([`baselines`]).
//!
//! Episode rollouts, evaluation, and oracle enumeration are data-parallel
//! via rayon when the default `parallel` feature is enabled; disabling it
//! produces bit-identical results on a single thread.

pub mod baselines;
pub mod config;
pub mod cost;
pub mod env;
pub mod error;
pub mod gae;
pub mod nn;
pub mod par;
pub mod policy;
pub mod rng;
pub mod trainer;

pub use config::ScenarioConfig;
pub use error::{Error, Result};
