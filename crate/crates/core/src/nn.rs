//! Multilayer perceptrons, reverse-mode gradients and Adam.
//!
//! Parameters of a network are stored flat, layer by layer: the weight matrix
//! (`out x in`, row-major) followed by the bias vector (`out`). Hidden layers
//! use ReLU, the output layer is affine.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::control::ControlProblem;
use crate::error::{Error, Result};
use crate::rng;

/// Number of flattened parameters for a width chain: sum of `out*in + out`.
pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
}

fn validate_widths(widths: &[usize]) -> Result<()> {
    if widths.len() < 2 {
        return Err(Error::config("an MLP needs at least input and output widths"));
    }
    if widths.contains(&0) {
        return Err(Error::config("MLP widths must be positive"));
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Weights and biases of one perceptron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    widths: Vec<usize>,
    params: Vec<f64>,
}

/// Intermediate values kept by [`MlpParams::forward`] for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    widths: Vec<usize>,
    // acts[0] is the input, acts[l] the output of layer l (post-activation
    // for hidden layers, raw for the output layer).
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }

    fn prepare(&mut self, widths: &[usize]) {
        if self.widths != widths {
            self.widths = widths.to_vec();
            self.acts = widths.iter().map(|&w| vec![0.0; w]).collect();
            let max = widths.iter().copied().max().unwrap_or(0);
            self.delta = vec![0.0; max];
            self.delta_prev = vec![0.0; max];
        }
    }
}

impl MlpParams {
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        validate_widths(widths)?;
        Ok(Self {
            widths: widths.to_vec(),
            params: vec![0.0; param_count(widths)],
        })
    }

    /// Weights uniform on `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init(widths: &[usize], seed: u64) -> Result<Self> {
        let mut mlp = Self::zeros(widths)?;
        let mut rng = rng::seeded(seed);
        let mut offset = 0;
        for w in widths.windows(2) {
            let (fan_in, out) = (w[0], w[1]);
            let half = 1.0 / (fan_in as f64).sqrt();
            for p in &mut mlp.params[offset..offset + out * fan_in] {
                *p = rng.gen_range(-half..=half);
            }
            offset += out * fan_in + out;
        }
        Ok(mlp)
    }

    pub fn from_parts(widths: Vec<usize>, params: Vec<f64>) -> Result<Self> {
        validate_widths(&widths)?;
        let expected = param_count(&widths);
        if params.len() != expected {
            return Err(Error::Dimension {
                what: "flattened parameters",
                expected,
                got: params.len(),
            });
        }
        Ok(Self { widths, params })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// `(weights, biases)` of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (off, fan_in, out) = self.layer_offset(l);
        let w = &self.params[off..off + out * fan_in];
        let b = &self.params[off + out * fan_in..off + out * fan_in + out];
        (w, b)
    }

    fn layer_offset(&self, l: usize) -> (usize, usize, usize) {
        let off = param_count(&self.widths[..=l]);
        (off, self.widths[l], self.widths[l + 1])
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        let mut cache = ForwardCache::default();
        self.forward_into(input, &mut cache)?;
        Ok((cache.output().to_vec(), cache))
    }

    /// Forward pass reusing `cache`; the output is `cache.output()`.
    pub fn forward_into(&self, input: &[f64], cache: &mut ForwardCache) -> Result<()> {
        if input.len() != self.widths[0] {
            return Err(Error::Dimension {
                what: "network input",
                expected: self.widths[0],
                got: input.len(),
            });
        }
        cache.prepare(&self.widths);
        cache.acts[0].copy_from_slice(input);
        let last = self.num_layers() - 1;
        let mut off = 0;
        for l in 0..=last {
            let (fan_in, out) = (self.widths[l], self.widths[l + 1]);
            let w = &self.params[off..off + out * fan_in];
            let b = &self.params[off + out * fan_in..off + out * fan_in + out];
            let (before, after) = cache.acts.split_at_mut(l + 1);
            let x = &before[l];
            let y = &mut after[0];
            for o in 0..out {
                let v = b[o] + dot(&w[o * fan_in..(o + 1) * fan_in], x);
                y[o] = if l < last { v.max(0.0) } else { v };
            }
            off += out * fan_in + out;
        }
        Ok(())
    }

    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grads = vec![0.0; self.params.len()];
        let mut input_grad = vec![0.0; self.widths[0]];
        let mut cache = cache.clone();
        self.backward_accumulate(&mut cache, upstream, &mut grads, Some(&mut input_grad))?;
        Ok((grads, input_grad))
    }

    /// Adds the gradient of `<upstream, output>` to `grads` (and to
    /// `input_grad` when given). The ReLU derivative at zero is taken as 0.
    pub fn backward_accumulate(
        &self,
        cache: &mut ForwardCache,
        upstream: &[f64],
        grads: &mut [f64],
        input_grad: Option<&mut [f64]>,
    ) -> Result<()> {
        if cache.widths != self.widths {
            return Err(Error::StaleCache(format!(
                "cache built for widths {:?}, network has {:?}",
                cache.widths, self.widths
            )));
        }
        if upstream.len() != self.output_dim() {
            return Err(Error::Dimension {
                what: "upstream gradient",
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        if grads.len() != self.params.len() {
            return Err(Error::Dimension {
                what: "parameter gradient buffer",
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        let layers = self.num_layers();
        let mut delta = std::mem::take(&mut cache.delta);
        let mut delta_prev = std::mem::take(&mut cache.delta_prev);
        let out_dim = self.output_dim();
        delta[..out_dim].copy_from_slice(upstream);
        let want_input = input_grad.is_some();
        for l in (0..layers).rev() {
            let (off, fan_in, out) = self.layer_offset(l);
            let x = &cache.acts[l];
            let d = &delta[..out];
            let (gw, gb) = grads[off..off + out * fan_in + out].split_at_mut(out * fan_in);
            for o in 0..out {
                if d[o] != 0.0 {
                    axpy(d[o], x, &mut gw[o * fan_in..(o + 1) * fan_in]);
                    gb[o] += d[o];
                }
            }
            if l == 0 && !want_input {
                break;
            }
            let w = &self.params[off..off + out * fan_in];
            let dp = &mut delta_prev[..fan_in];
            dp.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..out {
                if d[o] != 0.0 {
                    axpy(d[o], &w[o * fan_in..(o + 1) * fan_in], dp);
                }
            }
            if l > 0 {
                // x holds ReLU outputs; a zero output means a non-positive
                // pre-activation, where the derivative is taken as 0.
                for (g, &a) in dp.iter_mut().zip(x.iter()) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            std::mem::swap(&mut delta, &mut delta_prev);
        }
        if let Some(ig) = input_grad {
            for (g, v) in ig.iter_mut().zip(&delta[..self.widths[0]]) {
                *g += v;
            }
        }
        cache.delta = delta;
        cache.delta_prev = delta_prev;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
        }
    }
}

/// One bias-corrected Adam update. Parameters are left untouched when the
/// gradient contains a non-finite entry.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Dimension {
            what: "adam parameter vector",
            expected: state.first_moment.len(),
            got: grads.len().min(params.len()),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient entry {} at index {i} (adam step {})",
            grads[i],
            state.step_count + 1
        )));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(
        state
            .first_moment
            .iter_mut()
            .zip(state.second_moment.iter_mut()),
    ) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Which observations feed the network at decision time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    State,
    Noise,
    StateNoise,
}

impl InputMode {
    pub fn input_dim(self, problem: &ControlProblem) -> usize {
        match self {
            InputMode::State => problem.state_dim,
            InputMode::Noise => problem.noise_dim,
            InputMode::StateNoise => problem.state_dim + problem.noise_dim,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            InputMode::State => 0,
            InputMode::Noise => 1,
            InputMode::StateNoise => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(InputMode::State),
            1 => Some(InputMode::Noise),
            2 => Some(InputMode::StateNoise),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden_widths: Vec<usize>,
    /// One network per decision time; otherwise one shared network with the
    /// time index as an extra leading input.
    #[serde(default = "default_true")]
    pub per_time: bool,
    #[serde(default)]
    pub seed: u64,
    pub input_mode: InputMode,
}

fn default_true() -> bool {
    true
}

impl NetConfig {
    pub fn new(hidden_widths: Vec<usize>, input_mode: InputMode, seed: u64) -> Self {
        Self {
            hidden_widths,
            per_time: true,
            seed,
            input_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_widths.is_empty() {
            return Err(Error::config("hidden_widths must be non-empty"));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        Ok(())
    }

    pub fn widths(&self, problem: &ControlProblem) -> Vec<usize> {
        let extra = usize::from(!self.per_time);
        let mut w = vec![self.input_mode.input_dim(problem) + extra];
        w.extend_from_slice(&self.hidden_widths);
        w.push(problem.control_dim);
        w
    }

    /// Stable hash of the architecture-defining fields.
    pub fn config_hash(&self, widths: &[usize]) -> u64 {
        let mut bytes = Vec::new();
        for &w in widths {
            bytes.extend_from_slice(&(w as u64).to_le_bytes());
        }
        bytes.push(self.input_mode.code());
        bytes.push(u8::from(self.per_time));
        bytes.extend_from_slice(&self.seed.to_le_bytes());
        rng::fnv1a(&bytes)
    }
}

/// Per-time networks acting as a feedback action.
///
/// `slots[t]` names the network used at time `t`, or `None` at frozen times
/// (degenerate control box), where the action is the box point itself.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkPolicy {
    pub config: NetConfig,
    pub nets: Vec<MlpParams>,
    pub slots: Vec<Option<usize>>,
}

impl NetworkPolicy {
    /// Fresh networks for every trainable decision time of `problem`.
    pub fn init(problem: &ControlProblem, config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let widths = config.widths(problem);
        let mut nets = Vec::new();
        let mut slots = Vec::with_capacity(problem.horizon);
        for t in 0..problem.horizon {
            if problem.control_box[t].is_degenerate() {
                slots.push(None);
                continue;
            }
            if config.per_time || nets.is_empty() {
                let seed = rng::derive_seed(&[config.seed, t as u64]);
                nets.push(MlpParams::init(&widths, seed)?);
            }
            slots.push(Some(nets.len() - 1));
        }
        Ok(Self {
            config: config.clone(),
            nets,
            slots,
        })
    }

    pub fn net_at(&self, t: usize) -> Option<&MlpParams> {
        self.slots.get(t).copied().flatten().map(|i| &self.nets[i])
    }

    pub fn total_params(&self) -> usize {
        self.nets.iter().map(MlpParams::len).sum()
    }

    /// Writes the network input for time `t` into `buf`.
    pub fn build_input(&self, t: usize, x: &[f64], z_t: &[f64], buf: &mut Vec<f64>) {
        buf.clear();
        if !self.config.per_time {
            buf.push(t as f64);
        }
        match self.config.input_mode {
            InputMode::State => buf.extend_from_slice(x),
            InputMode::Noise => buf.extend_from_slice(z_t),
            InputMode::StateNoise => {
                buf.extend_from_slice(x);
                buf.extend_from_slice(z_t);
            }
        }
    }

    /// Offset of the state block inside the network input, if the state is
    /// an input at all.
    pub(crate) fn state_input_offset(&self) -> Option<usize> {
        let lead = usize::from(!self.config.per_time);
        match self.config.input_mode {
            InputMode::State | InputMode::StateNoise => Some(lead),
            InputMode::Noise => None,
        }
    }
}

/// Wraps per-time networks into a feedback action, checking that every
/// non-frozen decision time has a network of the right shape.
pub fn network_action(
    problem: &ControlProblem,
    nets: Vec<MlpParams>,
    slots: Vec<Option<usize>>,
    config: &NetConfig,
) -> Result<crate::control::FeedbackAction> {
    config.validate()?;
    if slots.len() != problem.horizon {
        return Err(Error::Dimension {
            what: "network slots",
            expected: problem.horizon,
            got: slots.len(),
        });
    }
    let widths = config.widths(problem);
    for t in 0..problem.horizon {
        match slots[t] {
            None if !problem.control_box[t].is_degenerate() => {
                return Err(Error::config(format!("missing network for decision time {t}")));
            }
            None => {}
            Some(i) => {
                let net = nets.get(i).ok_or_else(|| {
                    Error::config(format!("slot for time {t} names missing network {i}"))
                })?;
                if net.input_dim() != widths[0] || net.output_dim() != problem.control_dim {
                    return Err(Error::config(format!(
                        "network for time {t} has widths {:?}, expected input {} and output {}",
                        net.widths(),
                        widths[0],
                        problem.control_dim
                    )));
                }
            }
        }
    }
    Ok(crate::control::FeedbackAction::Network(NetworkPolicy {
        config: config.clone(),
        nets,
        slots,
    }))
}
