//! Dense network substrate: MLP forward/backward over flat parameter
//! vectors, Glorot initialization, Adam, and checkpoint bytes.
//!
//! Hidden layers use tanh, the output layer is identity. All math is f64.
//! Parameters for one network live in a flat vector laid out layer by
//! layer: row-major weights `[w_in × w_out]` followed by biases `[w_out]`.

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Fnv1a, TAG_INIT};

/// Architecture of one MLP: input, hidden..., output widths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Shape(format!(
                "an MLP needs at least input and output widths, got {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Shape(format!("zero layer width in {widths:?}")));
        }
        Ok(MlpSpec {
            layer_widths: widths.to_vec(),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// Number of affine layers.
    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    /// Total parameter count: Σ (w_in × w_out + w_out).
    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Flat range of layer `l`'s weight matrix (row-major, in × out).
    pub fn weight_range(&self, layer: usize) -> Range<usize> {
        let mut off = 0;
        for l in 0..layer {
            off += self.layer_widths[l] * self.layer_widths[l + 1] + self.layer_widths[l + 1];
        }
        off..off + self.layer_widths[layer] * self.layer_widths[layer + 1]
    }

    /// Flat range of layer `l`'s bias vector.
    pub fn bias_range(&self, layer: usize) -> Range<usize> {
        let w = self.weight_range(layer);
        w.end..w.end + self.layer_widths[layer + 1]
    }

    /// Human-readable location of a flat parameter index.
    pub fn describe_index(&self, index: usize) -> String {
        for l in 0..self.num_layers() {
            if self.weight_range(l).contains(&index) {
                return format!("layer {l} weights");
            }
            if self.bias_range(l).contains(&index) {
                return format!("layer {l} biases");
            }
        }
        format!("index {index} out of bounds")
    }

    /// Stable hash of the architecture, embedded in checkpoints.
    pub fn stable_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.write_u64(self.layer_widths.len() as u64);
        for &w in &self.layer_widths {
            h.write_u64(w as u64);
        }
        h.finish()
    }
}

/// Flat parameter storage for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub data: Vec<f64>,
}

/// Post-activation values of every layer, input first, output last.
/// Consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub activations: Vec<Vec<f64>>,
}

/// Gradients of a scalar objective with respect to parameters and input.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

/// Glorot-uniform weights, zero biases, deterministic per seed.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, TAG_INIT, 0));
    let mut data = vec![0.0; spec.param_count()];
    for l in 0..spec.num_layers() {
        let fan_in = spec.layer_widths[l];
        let fan_out = spec.layer_widths[l + 1];
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in &mut data[spec.weight_range(l)] {
            *w = rng.random_range(-bound..bound);
        }
        // biases stay zero
    }
    ParamVector { data }
}

/// Affine + tanh composition; the output layer is identity.
///
/// Returns the output and a cache of per-layer activations for [`backward`].
pub fn forward(spec: &MlpSpec, params: &[f64], input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    if input.len() != spec.input_dim() {
        return Err(Error::Shape(format!(
            "input length {} does not match spec input width {}",
            input.len(),
            spec.input_dim()
        )));
    }
    if params.len() != spec.param_count() {
        return Err(Error::Shape(format!(
            "parameter length {} does not match spec count {}",
            params.len(),
            spec.param_count()
        )));
    }
    let mut activations = Vec::with_capacity(spec.layer_widths.len());
    activations.push(input.to_vec());
    for l in 0..spec.num_layers() {
        let w_in = spec.layer_widths[l];
        let w_out = spec.layer_widths[l + 1];
        let weights = &params[spec.weight_range(l)];
        let biases = &params[spec.bias_range(l)];
        let prev = activations.last().unwrap();
        let mut next = vec![0.0; w_out];
        for j in 0..w_out {
            let mut z = biases[j];
            for i in 0..w_in {
                z += prev[i] * weights[i * w_out + j];
            }
            next[j] = if l + 1 == spec.num_layers() { z } else { z.tanh() };
        }
        activations.push(next);
    }
    let output = activations.last().unwrap().clone();
    Ok((output, ForwardCache { activations }))
}

/// Gradient of `output_grad · output` with respect to every parameter and
/// the input, given the cache of the matching forward pass.
pub fn backward(
    spec: &MlpSpec,
    params: &[f64],
    cache: &ForwardCache,
    output_grad: &[f64],
) -> Result<Gradients> {
    if cache.activations.len() != spec.layer_widths.len()
        || cache
            .activations
            .iter()
            .zip(&spec.layer_widths)
            .any(|(a, &w)| a.len() != w)
    {
        return Err(Error::State(
            "forward cache does not match network spec".into(),
        ));
    }
    if output_grad.len() != spec.output_dim() {
        return Err(Error::Shape(format!(
            "output grad length {} does not match output width {}",
            output_grad.len(),
            spec.output_dim()
        )));
    }
    let mut param_grads = vec![0.0; spec.param_count()];
    let mut grad = output_grad.to_vec();
    for l in (0..spec.num_layers()).rev() {
        let w_in = spec.layer_widths[l];
        let w_out = spec.layer_widths[l + 1];
        let weights = &params[spec.weight_range(l)];
        let prev = &cache.activations[l];
        let post = &cache.activations[l + 1];
        // identity on the output layer, tanh elsewhere
        let mut dz = grad;
        if l + 1 != spec.num_layers() {
            for (d, &a) in dz.iter_mut().zip(post) {
                *d *= 1.0 - a * a;
            }
        }
        let wr = spec.weight_range(l).start;
        let br = spec.bias_range(l).start;
        for j in 0..w_out {
            param_grads[br + j] += dz[j];
            for i in 0..w_in {
                param_grads[wr + i * w_out + j] += prev[i] * dz[j];
            }
        }
        let mut prev_grad = vec![0.0; w_in];
        for i in 0..w_in {
            let mut acc = 0.0;
            for j in 0..w_out {
                acc += weights[i * w_out + j] * dz[j];
            }
            prev_grad[i] = acc;
        }
        grad = prev_grad;
    }
    Ok(Gradients {
        params: param_grads,
        input: grad,
    })
}

/// Adam optimizer state for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One textbook Adam step with bias correction.
///
/// A non-finite gradient entry aborts before touching any parameter; the
/// error carries the flat index so callers can name the slice.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "adam shapes disagree: params {}, grads {}, state {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient at flat index {bad}"
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Adam step that names the offending layer slice on numeric failure.
pub fn adam_step_mlp(
    spec: &MlpSpec,
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
) -> Result<()> {
    adam_step(params, grads, state).map_err(|e| match e {
        Error::Numeric(msg) => {
            let idx: usize = msg
                .rsplit(' ')
                .next()
                .and_then(|s| s.parse().ok())
                .unwrap_or(0);
            Error::Numeric(format!("non-finite gradient in {}", spec.describe_index(idx)))
        }
        other => other,
    })
}

/// Scales `grads` so its global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// Checkpoint byte format, version 1:
///
/// ```text
/// offset 0:  u32 LE  format_version (= 1)
/// offset 4:  u64 LE  spec_hash
/// offset 12: u64 LE  param_count
/// offset 20: param_count × f64 LE (raw IEEE-754 bits)
/// ```
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serializes a flat parameter vector with its spec hash.
pub fn serialize_params(spec_hash: u64, params: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + params.len() * 8);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&spec_hash.to_le_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for &p in params {
        out.extend_from_slice(&p.to_bits().to_le_bytes());
    }
    out
}

/// Parses checkpoint bytes, verifying version, spec hash, and length.
pub fn deserialize_params(bytes: &[u8], expected_spec_hash: u64) -> Result<Vec<f64>> {
    if bytes.len() < 20 {
        return Err(Error::Format(format!(
            "checkpoint truncated: {} bytes, need at least 20",
            bytes.len()
        )));
    }
    let version = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let spec_hash = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    if spec_hash != expected_spec_hash {
        return Err(Error::Format(format!(
            "checkpoint spec hash {spec_hash:#018x} does not match expected {expected_spec_hash:#018x}"
        )));
    }
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let expected_len = 20 + count * 8;
    if bytes.len() != expected_len {
        return Err(Error::Format(format!(
            "checkpoint truncated: {} bytes, header promises {expected_len}",
            bytes.len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for chunk in bytes[20..].chunks_exact(8) {
        params.push(f64::from_bits(u64::from_le_bytes(chunk.try_into().unwrap())));
    }
    Ok(params)
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable ln(1 + e^x).
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
