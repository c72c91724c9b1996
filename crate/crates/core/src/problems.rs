//! Built-in problems: the two-period Merton portfolio problem with
//! exponential utility, and two-stage production planning.
//!
//! Both are registered as minimizations. Merton uses the negated utility
//! `phi(x) = exp(-lambda x) - 1`, so utility is `-loss`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::control::{ClosedForm, ControlBox, ControlProblem, FeedbackAction, Model, PathRef, TrainingSet};
use crate::error::{Error, Result};
use crate::rng;

/// Generator of i.i.d. disturbance trajectories.
pub trait Sampler: Send + Sync + fmt::Debug {
    fn id(&self) -> &str;
    fn horizon(&self) -> usize;
    fn noise_dim(&self) -> usize;

    /// Fills `out` (`horizon * noise_dim` values, `z_1` first).
    fn sample_into(&self, rng: &mut ChaCha8Rng, out: &mut [f64]);

    /// Trajectory number `index` of the stream keyed by `seed`.
    fn sample_path(&self, seed: u64, index: u64, out: &mut [f64]) {
        let key = rng::derive_seed(&[seed, rng::fnv1a(self.id().as_bytes())]);
        let mut r = rng::stream_rng(key, index);
        self.sample_into(&mut r, out);
    }
}

/// `n` i.i.d. trajectories; the same `(sampler, n, seed)` always gives the
/// same set, and trajectory `i` does not depend on `n`.
pub fn sample_training_set(sampler: &dyn Sampler, n: usize, seed: u64) -> Result<TrainingSet> {
    if n == 0 {
        return Err(Error::config("training sets need n >= 1"));
    }
    let stride = sampler.horizon() * sampler.noise_dim();
    let key = rng::derive_seed(&[seed, rng::fnv1a(sampler.id().as_bytes())]);
    let base = rng::stream_rng(key, 0);
    let mut data = vec![0.0; n * stride];
    data.par_chunks_mut(stride).enumerate().for_each(|(i, chunk)| {
        let mut r = base.clone();
        r.set_stream(i as u64);
        sampler.sample_into(&mut r, chunk);
    });
    TrainingSet::from_flat(
        data,
        sampler.horizon(),
        sampler.noise_dim(),
        seed,
        sampler.id().to_string(),
    )
}

/// Samplers addressable by id.
#[derive(Debug, Default, Clone)]
pub struct SamplerRegistry {
    samplers: BTreeMap<String, Arc<dyn Sampler>>,
}

impl SamplerRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, sampler: Arc<dyn Sampler>) {
        self.samplers.insert(sampler.id().to_string(), sampler);
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn Sampler>> {
        self.samplers
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnknownSampler(id.to_string()))
    }

    pub fn sample(&self, id: &str, n: usize, seed: u64) -> Result<TrainingSet> {
        sample_training_set(self.get(id)?.as_ref(), n, seed)
    }
}

/// A problem together with its sampler and, when known, its optimal action.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub problem: ControlProblem,
    pub sampler: Arc<dyn Sampler>,
    pub oracle: Option<FeedbackAction>,
}

impl ProblemInstance {
    pub fn sampler_id(&self) -> &str {
        self.sampler.id()
    }

    pub fn registry(&self) -> SamplerRegistry {
        let mut r = SamplerRegistry::new();
        r.register(self.sampler.clone());
        r
    }
}

/// Always returns the same trajectory.
#[derive(Debug, Clone)]
pub struct PointMassSampler {
    id: String,
    horizon: usize,
    noise_dim: usize,
    data: Vec<f64>,
}

impl PointMassSampler {
    pub fn new(id: impl Into<String>, trajectory: &crate::control::Trajectory) -> Self {
        let view = trajectory.view();
        Self {
            id: id.into(),
            horizon: view.horizon(),
            noise_dim: view.noise_dim(),
            data: view.data().to_vec(),
        }
    }
}

impl Sampler for PointMassSampler {
    fn id(&self) -> &str {
        &self.id
    }
    fn horizon(&self) -> usize {
        self.horizon
    }
    fn noise_dim(&self) -> usize {
        self.noise_dim
    }
    fn sample_into(&self, _rng: &mut ChaCha8Rng, out: &mut [f64]) {
        out.copy_from_slice(&self.data);
    }
}

/// Gaussian truncated symmetrically at `mean +- clip_sigmas * std`, drawn by
/// rejection.
fn truncated_normal(rng: &mut ChaCha8Rng, mean: f64, std: f64, clip_sigmas: f64) -> f64 {
    loop {
        let e: f64 = StandardNormal.sample(rng);
        if e.abs() <= clip_sigmas {
            return mean + std * e;
        }
    }
}

/// One-dimensional marginal law of a demand stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum Marginal {
    Uniform { low: f64, high: f64 },
    TruncatedNormal { mean: f64, std: f64, clip_sigmas: f64 },
}

impl Marginal {
    fn validate(&self) -> Result<()> {
        match *self {
            Marginal::Uniform { low, high } if !(low < high) => {
                Err(Error::config("uniform marginal needs low < high"))
            }
            Marginal::TruncatedNormal { std, clip_sigmas, .. } if !(std > 0.0 && clip_sigmas > 0.0) => {
                Err(Error::config("truncated normal needs std > 0 and clip_sigmas > 0"))
            }
            _ => Ok(()),
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            Marginal::Uniform { low, high } => rng.gen_range(low..high),
            Marginal::TruncatedNormal {
                mean,
                std,
                clip_sigmas,
            } => truncated_normal(rng, mean, std, clip_sigmas),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Marginal::Uniform { low, high } => 0.5 * (low + high),
            Marginal::TruncatedNormal { mean, .. } => mean,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Marginal::Uniform { low, high } => (high - low).powi(2) / 12.0,
            Marginal::TruncatedNormal {
                std, clip_sigmas, ..
            } => {
                let n = Normal::new(0.0, 1.0).expect("standard normal");
                let k = clip_sigmas;
                let mass = 2.0 * n.cdf(k) - 1.0;
                std * std * (1.0 - 2.0 * k * n.pdf(k) / mass)
            }
        }
    }

    pub fn support(&self) -> (f64, f64) {
        match *self {
            Marginal::Uniform { low, high } => (low, high),
            Marginal::TruncatedNormal {
                mean,
                std,
                clip_sigmas,
            } => (mean - clip_sigmas * std, mean + clip_sigmas * std),
        }
    }
}

// ---------------------------------------------------------------------------
// Merton

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MertonParams {
    pub d: usize,
    pub lambda: f64,
    pub r: f64,
    pub m: f64,
    pub s: f64,
    /// Unit direction of the second-period return; defaults to `e_1`.
    pub eta: Vec<f64>,
    pub z1_low: f64,
    pub z1_high: f64,
    /// The second-period Gaussian factor is truncated at this many standard
    /// deviations so that costs stay bounded.
    pub zeta_clip_sigmas: f64,
}

impl MertonParams {
    /// `lambda = 1, r = 0, m = 0.18, s = 0.44`, `Z_1 ~ U[-0.5, 0.5]^d`.
    pub fn default_with_dim(d: usize) -> Self {
        let mut eta = vec![0.0; d];
        if d > 0 {
            eta[0] = 1.0;
        }
        Self {
            d,
            lambda: 1.0,
            r: 0.0,
            m: 0.18,
            s: 0.44,
            eta,
            z1_low: -0.5,
            z1_high: 0.5,
            zeta_clip_sigmas: 8.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::config("Merton needs d >= 1"));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::config("risk aversion lambda must be positive"));
        }
        if !(self.s > 0.0) {
            return Err(Error::config("volatility s must be positive"));
        }
        if self.eta.len() != self.d {
            return Err(Error::Dimension {
                what: "eta",
                expected: self.d,
                got: self.eta.len(),
            });
        }
        let norm = self.eta.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!("eta must have unit norm, got {norm}")));
        }
        if !(self.z1_low < self.z1_high) {
            return Err(Error::config("z1_low must be below z1_high"));
        }
        if !(self.zeta_clip_sigmas > 0.0) {
            return Err(Error::config("zeta_clip_sigmas must be positive"));
        }
        Ok(())
    }

    pub fn sampler_id(&self) -> String {
        format!(
            "merton:d={},m={},s={},z1=[{},{}],clip={},eta={:016x}",
            self.d,
            self.m,
            self.s,
            self.z1_low,
            self.z1_high,
            self.zeta_clip_sigmas,
            rng::fnv1a(
                &self
                    .eta
                    .iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect::<Vec<u8>>()
            )
        )
    }
}

#[derive(Debug, Clone)]
struct MertonModel {
    lambda: f64,
    r: f64,
}

impl Model for MertonModel {
    fn step(&self, _t: usize, x: &[f64], z_next: &[f64], a: &[f64], x_next: &mut [f64]) {
        let gain: f64 = a.iter().zip(z_next).map(|(ai, zi)| ai * (zi - self.r)).sum();
        x_next[0] = (1.0 + self.r) * x[0] + gain;
    }

    fn step_vjp(
        &self,
        _t: usize,
        _x: &[f64],
        z_next: &[f64],
        _a: &[f64],
        g_next: &[f64],
        g_x: &mut [f64],
        g_a: &mut [f64],
    ) {
        let g = g_next[0];
        g_x[0] += (1.0 + self.r) * g;
        for (ga, z) in g_a.iter_mut().zip(z_next) {
            *ga += g * (z - self.r);
        }
    }

    fn terminal_cost(&self, x: &[f64]) -> f64 {
        (-self.lambda * x[0]).exp_m1()
    }

    fn terminal_cost_grad(&self, x: &[f64], scale: f64, g_x: &mut [f64]) {
        g_x[0] += -scale * self.lambda * (-self.lambda * x[0]).exp();
    }

    /// Terminal wealth is increasing in every `alpha_t . (z_{t+1} - r)` when
    /// `1 + r > 0`, so each period takes the box corner maximizing it.
    fn exact_pathwise(&self, problem: &ControlProblem, z: PathRef<'_>) -> Option<Vec<Vec<f64>>> {
        if 1.0 + self.r <= 0.0 || problem.control_box.iter().any(|b| !b.is_bounded()) {
            return None;
        }
        Some(
            (0..problem.horizon)
                .map(|t| {
                    let b = &problem.control_box[t];
                    z.point(t + 1)
                        .iter()
                        .enumerate()
                        .map(|(i, &zi)| {
                            let excess = zi - self.r;
                            if excess > 0.0 {
                                b.upper[i]
                            } else if excess < 0.0 {
                                b.lower[i]
                            } else {
                                0.0f64.clamp(b.lower[i], b.upper[i])
                            }
                        })
                        .collect()
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone)]
struct MertonSampler {
    id: String,
    params: MertonParams,
}

impl Sampler for MertonSampler {
    fn id(&self) -> &str {
        &self.id
    }
    fn horizon(&self) -> usize {
        2
    }
    fn noise_dim(&self) -> usize {
        self.params.d
    }
    fn sample_into(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        let p = &self.params;
        let (z1, z2) = out.split_at_mut(p.d);
        for v in z1.iter_mut() {
            *v = rng.gen_range(p.z1_low..p.z1_high);
        }
        let zeta = truncated_normal(rng, p.m, p.s, p.zeta_clip_sigmas);
        for (v, e) in z2.iter_mut().zip(&p.eta) {
            *v = zeta * e;
        }
    }
}

/// Two-period Merton problem: the first-period portfolio is frozen at
/// `(1/d, ..., 1/d)`, the second-period position is the control, boxed to
/// `[-box_bound, box_bound]^d`.
pub fn merton_problem(p: &MertonParams, box_bound: f64) -> Result<ProblemInstance> {
    p.validate()?;
    if !(box_bound >= 0.0) {
        return Err(Error::config("box bound must be non-negative"));
    }
    let d = p.d;
    let boxes = vec![
        ControlBox::point(vec![1.0 / d as f64; d]),
        ControlBox::uniform(d, -box_bound, box_bound)?,
    ];
    let c_star = merton_cost_bound(p, &boxes);
    let problem = ControlProblem::new(
        format!("merton(d={d})"),
        2,
        1,
        d,
        d,
        boxes,
        vec![0.0],
        c_star,
        Arc::new(MertonModel {
            lambda: p.lambda,
            r: p.r,
        }),
    )?;
    let sampler = Arc::new(MertonSampler {
        id: p.sampler_id(),
        params: p.clone(),
    });
    let oracle = merton_closed_form(p)
        .ok()
        .map(|(a_star, _)| FeedbackAction::ClosedForm(ClosedForm::Merton { a_star }));
    Ok(ProblemInstance {
        problem,
        sampler,
        oracle,
    })
}

/// Worst-case absolute cost given the boxes and the sampler support: the
/// cost is `exp(-lambda x_2) - 1`, bounded below by -1 and above through the
/// smallest reachable wealth. Each period's gain `a . (z - r)` is bilinear,
/// so its minimum over the box and support sits at corners.
fn merton_cost_bound(p: &MertonParams, boxes: &[ControlBox]) -> f64 {
    let zeta_lo = p.m - p.zeta_clip_sigmas * p.s;
    let zeta_hi = p.m + p.zeta_clip_sigmas * p.s;
    // extreme of sum_i c_i (z_i - r) over c in the box and z_i in [lo_i, hi_i]
    let extreme_gain = |b: &ControlBox, lo: &dyn Fn(usize) -> f64, hi: &dyn Fn(usize) -> f64, pick: fn(f64, f64) -> f64| -> f64 {
        (0..b.dim())
            .map(|i| {
                let zs = [lo(i) - p.r, hi(i) - p.r];
                let cs = [b.lower[i], b.upper[i]];
                let mut corners = zs.iter().flat_map(|z| cs.iter().map(move |c| c * z));
                let first = corners.next().unwrap();
                corners.fold(first, pick)
            })
            .sum()
    };
    let eta_lo = |i: usize| (zeta_lo * p.eta[i]).min(zeta_hi * p.eta[i]);
    let eta_hi = |i: usize| (zeta_lo * p.eta[i]).max(zeta_hi * p.eta[i]);
    let x1_min = extreme_gain(&boxes[0], &|_| p.z1_low, &|_| p.z1_high, f64::min);
    let x1_max = extreme_gain(&boxes[0], &|_| p.z1_low, &|_| p.z1_high, f64::max);
    let x2_min = ((1.0 + p.r) * x1_min).min((1.0 + p.r) * x1_max)
        + extreme_gain(&boxes[1], &eta_lo, &eta_hi, f64::min);
    let worst = (-p.lambda * x2_min).exp_m1();
    worst.abs().max(1.0)
}

/// Optimal constant position and the certainty-equivalent formula value for
/// `r = 0`: `a* = m / (lambda s^2) eta` and `-m^2 / (2 lambda s^2)`.
///
/// The second value follows the sign of the `(1/lambda) ln(1 - v)`
/// convention; its magnitude is the certainty-equivalent gain of the optimal
/// position over cash, see [`certainty_equivalent`].
pub fn merton_closed_form(p: &MertonParams) -> Result<(Vec<f64>, f64)> {
    p.validate()?;
    if p.r != 0.0 {
        return Err(Error::UnsupportedRegime(format!(
            "closed form only available for r = 0 (got r = {})",
            p.r
        )));
    }
    let scale = p.m / (p.lambda * p.s * p.s);
    let a_star = p.eta.iter().map(|e| scale * e).collect();
    let ce_star = -p.m * p.m / (2.0 * p.lambda * p.s * p.s);
    Ok((a_star, ce_star))
}

/// Cash amount `c` with `u(c) = v` for `u(x) = 1 - exp(-lambda x)`, i.e.
/// `-ln(1 - v) / lambda`. Defined for `v < 1`.
pub fn certainty_equivalent(v: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("lambda must be positive, got {lambda}")));
    }
    if !(v < 1.0) {
        return Err(Error::Domain(format!(
            "utility value {v} is not below the utility supremum 1"
        )));
    }
    Ok(-(-v).ln_1p() / lambda)
}

/// Exponential utility `1 - exp(-lambda x)`.
pub fn exp_utility(x: f64, lambda: f64) -> f64 {
    -(-lambda * x).exp_m1()
}

// ---------------------------------------------------------------------------
// Production planning

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    /// `x^2`
    Quadratic,
    /// `|x|`
    Absolute,
}

impl Penalty {
    pub fn value(self, x: f64) -> f64 {
        match self {
            Penalty::Quadratic => x * x,
            Penalty::Absolute => x.abs(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Penalty::Quadratic => 2.0 * x,
            Penalty::Absolute => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProductionParams {
    pub penalty: Penalty,
    pub z1: Marginal,
    pub z2: Marginal,
    /// Upper production limit at the decision time.
    pub max_production: f64,
}

impl Default for ProductionParams {
    fn default() -> Self {
        Self {
            penalty: Penalty::Quadratic,
            z1: Marginal::Uniform {
                low: 0.0,
                high: 2.0,
            },
            z2: Marginal::TruncatedNormal {
                mean: 1.0,
                std: 0.3,
                clip_sigmas: 3.0,
            },
            max_production: 10.0,
        }
    }
}

impl ProductionParams {
    pub fn sampler_id(&self) -> String {
        format!("production:z1={:?},z2={:?}", self.z1, self.z2)
    }
}

#[derive(Debug, Clone)]
struct ProductionModel {
    penalty: Penalty,
}

impl Model for ProductionModel {
    fn step(&self, _t: usize, x: &[f64], z_next: &[f64], a: &[f64], x_next: &mut [f64]) {
        x_next[0] = (x[0] + z_next[0]) - a[0];
    }

    fn step_vjp(
        &self,
        _t: usize,
        _x: &[f64],
        _z_next: &[f64],
        _a: &[f64],
        g_next: &[f64],
        g_x: &mut [f64],
        g_a: &mut [f64],
    ) {
        g_x[0] += g_next[0];
        g_a[0] -= g_next[0];
    }

    fn terminal_cost(&self, x: &[f64]) -> f64 {
        self.penalty.value(x[0])
    }

    fn terminal_cost_grad(&self, x: &[f64], scale: f64, g_x: &mut [f64]) {
        g_x[0] += scale * self.penalty.derivative(x[0]);
    }

    /// The penalty vanishes only at zero, so production at the last decision
    /// time should clear the inventory; earlier times produce nothing beyond
    /// their box.
    fn exact_pathwise(&self, problem: &ControlProblem, z: PathRef<'_>) -> Option<Vec<Vec<f64>>> {
        let h = problem.horizon;
        let mut alpha = Vec::with_capacity(h);
        let mut x = problem.initial_state[0];
        for t in 0..h {
            let b = &problem.control_box[t];
            let a = if t + 1 == h {
                (x + z.point(t + 1)[0]).clamp(b.lower[0], b.upper[0])
            } else {
                0.0f64.clamp(b.lower[0], b.upper[0])
            };
            x = (x + z.point(t + 1)[0]) - a;
            alpha.push(vec![a]);
        }
        Some(alpha)
    }
}

#[derive(Debug, Clone)]
struct ProductionSampler {
    id: String,
    z1: Marginal,
    z2: Marginal,
}

impl Sampler for ProductionSampler {
    fn id(&self) -> &str {
        &self.id
    }
    fn horizon(&self) -> usize {
        2
    }
    fn noise_dim(&self) -> usize {
        1
    }
    fn sample_into(&self, rng: &mut ChaCha8Rng, out: &mut [f64]) {
        out[0] = self.z1.sample(rng);
        out[1] = self.z2.sample(rng);
    }
}

/// Two-stage production planning: nothing is produced at time 0, production
/// at time 1 lies in `[0, max_production]`, and the final inventory
/// `Z_1 + Z_2 - a(Z_1)` is penalized.
pub fn production_problem(p: &ProductionParams) -> Result<ProblemInstance> {
    p.z1.validate()?;
    p.z2.validate()?;
    if !(p.max_production > 0.0) {
        return Err(Error::config("max_production must be positive"));
    }
    let boxes = vec![
        ControlBox::point(vec![0.0]),
        ControlBox::uniform(1, 0.0, p.max_production)?,
    ];
    let (lo1, hi1) = p.z1.support();
    let (lo2, hi2) = p.z2.support();
    let worst_x = (hi1 + hi2).abs().max((lo1 + lo2 - p.max_production).abs());
    let c_star = p.penalty.value(worst_x);
    let problem = ControlProblem::new(
        "production",
        2,
        1,
        1,
        1,
        boxes,
        vec![0.0],
        c_star,
        Arc::new(ProductionModel { penalty: p.penalty }),
    )?;
    let sampler = Arc::new(ProductionSampler {
        id: p.sampler_id(),
        z1: p.z1,
        z2: p.z2,
    });
    let oracle = (p.penalty == Penalty::Quadratic).then(|| {
        FeedbackAction::ClosedForm(ClosedForm::ProductionMean {
            mean_z2: p.z2.mean(),
        })
    });
    Ok(ProblemInstance {
        problem,
        sampler,
        oracle,
    })
}
