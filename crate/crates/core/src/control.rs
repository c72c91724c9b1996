//! Control problems, disturbance trajectories and feedback actions.
//!
//! The controlled state follows `x_{t+1} = f(t, x_t, z_{t+1}, a(t, x_t, z_t))`
//! for `t = 0..T-1`, starting from the problem's initial state, with `z_0 = 0`.
//! The cost of an action along a trajectory is `sum_t psi(t, x_t, a_t) +
//! phi(x_T)`. Every problem is a minimization; maximization problems register
//! the negated objective.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ForwardCache, NetworkPolicy};
use crate::problems::SamplerRegistry;
use crate::stats;

/// Componentwise bounds for the control at one decision time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ControlBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension {
                what: "control box upper bound",
                expected: lower.len(),
                got: upper.len(),
            });
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::config("control box needs lower <= upper componentwise"));
        }
        Ok(Self { lower, upper })
    }

    pub fn uniform(dim: usize, lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower; dim], vec![upper; dim])
    }

    /// The single-point box `{point}`, used for uncontrolled decision times.
    pub fn point(point: Vec<f64>) -> Self {
        Self {
            lower: point.clone(),
            upper: point,
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn is_degenerate(&self) -> bool {
        self.lower.iter().zip(&self.upper).all(|(l, u)| l == u)
    }

    pub fn is_bounded(&self) -> bool {
        self.lower
            .iter()
            .chain(&self.upper)
            .all(|v| v.is_finite())
    }

    pub fn clip(&self, a: &mut [f64]) {
        for ((v, &l), &u) in a.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(l, u);
        }
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        a.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .all(|((v, l), u)| l <= v && v <= u)
    }

    /// Whether a gradient flows through component `i` of a raw output: the
    /// component must be free and the raw value inside the box.
    #[inline]
    pub fn passes_gradient(&self, i: usize, raw: f64) -> bool {
        let (l, u) = (self.lower[i], self.upper[i]);
        l < u && l <= raw && raw <= u
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| {
                if l.is_finite() && u.is_finite() {
                    0.5 * (l + u)
                } else {
                    0.0f64.clamp(l, u)
                }
            })
            .collect()
    }
}

/// Dynamics and costs of a control problem, together with the derivatives
/// the training loop needs.
///
/// Vector-Jacobian products accumulate into their output buffers.
pub trait Model: Send + Sync + fmt::Debug {
    /// `x_next = f(t, x, z_next, a)`.
    fn step(&self, t: usize, x: &[f64], z_next: &[f64], a: &[f64], x_next: &mut [f64]);

    /// Adds `g_next^T df/dx` to `g_x` and `g_next^T df/da` to `g_a`.
    #[allow(clippy::too_many_arguments)]
    fn step_vjp(
        &self,
        t: usize,
        x: &[f64],
        z_next: &[f64],
        a: &[f64],
        g_next: &[f64],
        g_x: &mut [f64],
        g_a: &mut [f64],
    );

    fn running_cost(&self, _t: usize, _x: &[f64], _a: &[f64]) -> f64 {
        0.0
    }

    /// Adds `scale * dpsi/dx` and `scale * dpsi/da`.
    fn running_cost_grad(
        &self,
        _t: usize,
        _x: &[f64],
        _a: &[f64],
        _scale: f64,
        _g_x: &mut [f64],
        _g_a: &mut [f64],
    ) {
    }

    fn terminal_cost(&self, x: &[f64]) -> f64;

    /// Adds `scale * dphi/dx` to `g_x`.
    fn terminal_cost_grad(&self, x: &[f64], scale: f64, g_x: &mut [f64]);

    /// Exact minimizer of the cost over constant control sequences on one
    /// trajectory, when the problem knows it in closed form.
    fn exact_pathwise(&self, _problem: &ControlProblem, _z: PathRef<'_>) -> Option<Vec<Vec<f64>>> {
        None
    }
}

/// A finite-horizon control problem.
///
/// Build with [`ControlProblem::new`], which checks the invariants.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub name: String,
    pub horizon: usize,
    pub state_dim: usize,
    pub noise_dim: usize,
    pub control_dim: usize,
    /// `control_box[t]` is the admissible set at decision time `t`.
    pub control_box: Vec<ControlBox>,
    pub initial_state: Vec<f64>,
    /// Uniform bound on the absolute pathwise cost for admissible inputs.
    pub c_star: f64,
    pub model: Arc<dyn Model>,
}

impl ControlProblem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        horizon: usize,
        state_dim: usize,
        noise_dim: usize,
        control_dim: usize,
        control_box: Vec<ControlBox>,
        initial_state: Vec<f64>,
        c_star: f64,
        model: Arc<dyn Model>,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if state_dim == 0 || noise_dim == 0 || control_dim == 0 {
            return Err(Error::config("all dimensions must be at least 1"));
        }
        if control_box.len() != horizon {
            return Err(Error::Dimension {
                what: "control boxes",
                expected: horizon,
                got: control_box.len(),
            });
        }
        for b in &control_box {
            if b.dim() != control_dim {
                return Err(Error::Dimension {
                    what: "control box",
                    expected: control_dim,
                    got: b.dim(),
                });
            }
            if b.lower.iter().zip(&b.upper).any(|(l, u)| !(l <= u)) {
                return Err(Error::config("control box needs lower <= upper componentwise"));
            }
        }
        if initial_state.len() != state_dim {
            return Err(Error::Dimension {
                what: "initial state",
                expected: state_dim,
                got: initial_state.len(),
            });
        }
        Ok(Self {
            name: name.into(),
            horizon,
            state_dim,
            noise_dim,
            control_dim,
            control_box,
            initial_state,
            c_star,
            model,
        })
    }

    pub fn is_frozen(&self, t: usize) -> bool {
        self.control_box[t].is_degenerate()
    }
}

/// Borrowed view of one disturbance trajectory `z_1..z_T`, stored flat.
#[derive(Debug, Clone, Copy)]
pub struct PathRef<'a> {
    data: &'a [f64],
    noise_dim: usize,
}

impl<'a> PathRef<'a> {
    pub fn new(data: &'a [f64], noise_dim: usize) -> Self {
        Self { data, noise_dim }
    }

    pub fn horizon(&self) -> usize {
        self.data.len() / self.noise_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// `z_t` for `t` in `1..=T`.
    pub fn point(&self, t: usize) -> &'a [f64] {
        debug_assert!(t >= 1);
        &self.data[(t - 1) * self.noise_dim..t * self.noise_dim]
    }

    pub fn data(&self) -> &'a [f64] {
        self.data
    }
}

/// One realization `z_1..z_T` of the disturbance (`z_0 = 0` is implicit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    data: Vec<f64>,
    noise_dim: usize,
}

impl Trajectory {
    pub fn from_points(points: Vec<Vec<f64>>) -> Result<Self> {
        let noise_dim = points.first().map(Vec::len).unwrap_or(0);
        if noise_dim == 0 {
            return Err(Error::config("a trajectory needs at least one non-empty point"));
        }
        let mut data = Vec::with_capacity(points.len() * noise_dim);
        for p in &points {
            if p.len() != noise_dim {
                return Err(Error::Dimension {
                    what: "trajectory point",
                    expected: noise_dim,
                    got: p.len(),
                });
            }
            data.extend_from_slice(p);
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("trajectory entries must be finite".into()));
        }
        Ok(Self { data, noise_dim })
    }

    /// Scalar noise convenience: `z_t = values[t-1]`.
    pub fn scalar(values: &[f64]) -> Result<Self> {
        Self::from_points(values.iter().map(|&v| vec![v]).collect())
    }

    pub fn horizon(&self) -> usize {
        self.data.len() / self.noise_dim
    }

    pub fn point(&self, t: usize) -> &[f64] {
        self.view().point(t)
    }

    pub fn view(&self) -> PathRef<'_> {
        PathRef::new(&self.data, self.noise_dim)
    }
}

impl<'a> From<&'a Trajectory> for PathRef<'a> {
    fn from(t: &'a Trajectory) -> Self {
        t.view()
    }
}

/// An indexed collection of trajectories with generation metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    data: Vec<f64>,
    n: usize,
    horizon: usize,
    noise_dim: usize,
    pub seed: u64,
    pub sampler_id: String,
}

impl TrainingSet {
    pub fn from_flat(
        data: Vec<f64>,
        horizon: usize,
        noise_dim: usize,
        seed: u64,
        sampler_id: impl Into<String>,
    ) -> Result<Self> {
        let stride = horizon * noise_dim;
        if stride == 0 || data.is_empty() || !data.len().is_multiple_of(stride) {
            return Err(Error::config(format!(
                "flat data of length {} does not hold whole trajectories of {} values",
                data.len(),
                stride
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("training set entries must be finite".into()));
        }
        Ok(Self {
            n: data.len() / stride,
            data,
            horizon,
            noise_dim,
            seed,
            sampler_id: sampler_id.into(),
        })
    }

    pub fn from_trajectories(
        trajectories: &[Trajectory],
        seed: u64,
        sampler_id: impl Into<String>,
    ) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::config("a training set needs at least one trajectory"))?;
        let (h, nd) = (first.horizon(), first.noise_dim);
        let mut data = Vec::with_capacity(trajectories.len() * h * nd);
        for t in trajectories {
            if t.horizon() != h || t.noise_dim != nd {
                return Err(Error::config("trajectories in a set must share shape"));
            }
            data.extend_from_slice(&t.data);
        }
        Self::from_flat(data, h, nd, seed, sampler_id)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn path(&self, i: usize) -> PathRef<'_> {
        let stride = self.horizon * self.noise_dim;
        PathRef::new(&self.data[i * stride..(i + 1) * stride], self.noise_dim)
    }

    pub fn trajectory(&self, i: usize) -> Trajectory {
        let p = self.path(i);
        Trajectory {
            data: p.data().to_vec(),
            noise_dim: self.noise_dim,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = PathRef<'_>> + '_ {
        (0..self.n).map(move |i| self.path(i))
    }

    /// Subset in the given index order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.horizon * self.noise_dim);
        for &i in indices {
            data.extend_from_slice(self.path(i).data());
        }
        Self::from_flat(
            data,
            self.horizon,
            self.noise_dim,
            self.seed,
            self.sampler_id.clone(),
        )
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }
}

type ActionFn = dyn Fn(usize, &[f64], &[f64], &mut [f64]) + Send + Sync;

/// Problem-specific closed-form actions.
#[derive(Clone)]
pub enum ClosedForm {
    /// The same control vector at every time, e.g. the Merton optimum.
    Merton { a_star: Vec<f64> },
    /// `a(t, x, z_t) = z_t + mean_z2`, the conditional-mean production rule
    /// for quadratic penalties and independent stages.
    ProductionMean { mean_z2: f64 },
    /// User-supplied `(t, x, z_t, out)` callable.
    Custom { tag: String, f: Arc<ActionFn> },
}

impl fmt::Debug for ClosedForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClosedForm::Merton { a_star } => f.debug_struct("Merton").field("a_star", a_star).finish(),
            ClosedForm::ProductionMean { mean_z2 } => f
                .debug_struct("ProductionMean")
                .field("mean_z2", mean_z2)
                .finish(),
            ClosedForm::Custom { tag, .. } => f.debug_struct("Custom").field("tag", tag).finish(),
        }
    }
}

/// A feedback action `a(t, x, z_t)`. Outputs are always clipped into the
/// control box of the decision time.
#[derive(Debug, Clone)]
pub enum FeedbackAction {
    /// `alpha[t]` at time `t`, whatever the state.
    Constant(Vec<Vec<f64>>),
    Network(NetworkPolicy),
    ClosedForm(ClosedForm),
}

impl FeedbackAction {
    pub fn zero(problem: &ControlProblem) -> Self {
        FeedbackAction::Constant(vec![vec![0.0; problem.control_dim]; problem.horizon])
    }

    pub(crate) fn check(&self, problem: &ControlProblem) -> Result<()> {
        match self {
            FeedbackAction::Constant(alpha) => {
                if alpha.len() != problem.horizon {
                    return Err(Error::Dimension {
                        what: "constant action length",
                        expected: problem.horizon,
                        got: alpha.len(),
                    });
                }
                if let Some(a) = alpha.iter().find(|a| a.len() != problem.control_dim) {
                    return Err(Error::Dimension {
                        what: "constant action control",
                        expected: problem.control_dim,
                        got: a.len(),
                    });
                }
            }
            FeedbackAction::Network(policy) => {
                if policy.slots.len() != problem.horizon {
                    return Err(Error::Dimension {
                        what: "network slots",
                        expected: problem.horizon,
                        got: policy.slots.len(),
                    });
                }
                if let Some(net) = policy.nets.first() {
                    if net.output_dim() != problem.control_dim {
                        return Err(Error::Dimension {
                            what: "network output",
                            expected: problem.control_dim,
                            got: net.output_dim(),
                        });
                    }
                }
                for t in 0..problem.horizon {
                    if policy.slots[t].is_none() && !problem.is_frozen(t) {
                        return Err(Error::config(format!(
                            "missing network for decision time {t}"
                        )));
                    }
                }
            }
            FeedbackAction::ClosedForm(ClosedForm::Merton { a_star }) => {
                if a_star.len() != problem.control_dim {
                    return Err(Error::Dimension {
                        what: "closed-form control",
                        expected: problem.control_dim,
                        got: a_star.len(),
                    });
                }
            }
            FeedbackAction::ClosedForm(ClosedForm::ProductionMean { .. }) => {
                if problem.control_dim != problem.noise_dim {
                    return Err(Error::config(
                        "conditional-mean rule needs control_dim == noise_dim",
                    ));
                }
            }
            FeedbackAction::ClosedForm(ClosedForm::Custom { .. }) => {}
        }
        Ok(())
    }

    /// Clipped action at `(t, x, z_t)`.
    pub fn evaluate(
        &self,
        problem: &ControlProblem,
        t: usize,
        x: &[f64],
        z_t: &[f64],
    ) -> Result<Vec<f64>> {
        self.check(problem)?;
        let mut ws = Rollout::new(problem);
        let mut out = vec![0.0; problem.control_dim];
        Rollout::raw_action_split(&mut ws.caches, &mut ws.input, self, t, x, z_t, &mut out)?;
        problem.control_box[t].clip(&mut out);
        Ok(out)
    }
}

/// States `x_0..x_T` and applied controls `a_0..a_{T-1}` along a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePath {
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
}

/// Reusable buffers for simulating and differentiating one trajectory.
#[derive(Debug)]
pub(crate) struct Rollout {
    horizon: usize,
    sd: usize,
    cd: usize,
    pub(crate) states: Vec<f64>,
    pub(crate) controls: Vec<f64>,
    raw: Vec<f64>,
    caches: Vec<ForwardCache>,
    input: Vec<f64>,
    zeros: Vec<f64>,
    g_x: Vec<f64>,
    g_prev: Vec<f64>,
    g_a: Vec<f64>,
    g_in: Vec<f64>,
}

impl Rollout {
    pub(crate) fn new(problem: &ControlProblem) -> Self {
        let (h, sd, cd) = (problem.horizon, problem.state_dim, problem.control_dim);
        Self {
            horizon: h,
            sd,
            cd,
            states: vec![0.0; (h + 1) * sd],
            controls: vec![0.0; h * cd],
            raw: vec![0.0; h * cd],
            caches: (0..h).map(|_| ForwardCache::default()).collect(),
            input: Vec::new(),
            zeros: vec![0.0; problem.noise_dim],
            g_x: vec![0.0; sd],
            g_prev: vec![0.0; sd],
            g_a: vec![0.0; cd],
            g_in: Vec::new(),
        }
    }

    /// Simulates the path and returns its cost. Assumes `action` was checked
    /// against `problem`.
    pub(crate) fn forward(
        &mut self,
        problem: &ControlProblem,
        action: &FeedbackAction,
        z: PathRef<'_>,
    ) -> Result<f64> {
        self.forward_with(problem, z, |caches, input, t, x, z_t, out| {
            Self::raw_action_split(caches, input, action, t, x, z_t, out)
        })
    }

    /// [`Rollout::forward`] for a bare network policy.
    pub(crate) fn forward_policy(
        &mut self,
        problem: &ControlProblem,
        policy: &NetworkPolicy,
        z: PathRef<'_>,
    ) -> Result<f64> {
        self.forward_with(problem, z, |caches, input, t, x, z_t, out| {
            Self::network_raw(caches, input, policy, t, x, z_t, out)
        })
    }

    fn forward_with<F>(&mut self, problem: &ControlProblem, z: PathRef<'_>, mut raw_action: F) -> Result<f64>
    where
        F: FnMut(&mut [ForwardCache], &mut Vec<f64>, usize, &[f64], &[f64], &mut [f64]) -> Result<()>,
    {
        let (sd, cd) = (self.sd, self.cd);
        self.states[..sd].copy_from_slice(&problem.initial_state);
        let mut cost = 0.0;
        for t in 0..self.horizon {
            let (done, rest) = self.states.split_at_mut((t + 1) * sd);
            let x = &done[t * sd..];
            let z_t: &[f64] = if t == 0 { &self.zeros } else { z.point(t) };
            let r = &mut self.raw[t * cd..(t + 1) * cd];
            raw_action(&mut self.caches, &mut self.input, t, x, z_t, r)?;
            let a = &mut self.controls[t * cd..(t + 1) * cd];
            a.copy_from_slice(r);
            problem.control_box[t].clip(a);
            cost += problem.model.running_cost(t, x, a);
            let x_next = &mut rest[..sd];
            problem.model.step(t, x, z.point(t + 1), a, x_next);
            if x_next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericOverflow { t: t + 1 });
            }
        }
        cost += problem
            .model
            .terminal_cost(&self.states[self.horizon * sd..]);
        if !cost.is_finite() {
            return Err(Error::Numeric(format!("non-finite pathwise cost {cost}")));
        }
        Ok(cost)
    }

    fn network_raw(
        caches: &mut [ForwardCache],
        input: &mut Vec<f64>,
        policy: &NetworkPolicy,
        t: usize,
        x: &[f64],
        z_t: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        match policy.slots[t] {
            None => out.iter_mut().for_each(|v| *v = 0.0),
            Some(i) => {
                policy.build_input(t, x, z_t, input);
                policy.nets[i].forward_into(input, &mut caches[t])?;
                out.copy_from_slice(caches[t].output());
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn raw_action_split(
        caches: &mut [ForwardCache],
        input: &mut Vec<f64>,
        action: &FeedbackAction,
        t: usize,
        x: &[f64],
        z_t: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        match action {
            FeedbackAction::Network(policy) => {
                return Self::network_raw(caches, input, policy, t, x, z_t, out)
            }
            FeedbackAction::Constant(alpha) => out.copy_from_slice(&alpha[t]),
            FeedbackAction::ClosedForm(ClosedForm::Merton { a_star }) => out.copy_from_slice(a_star),
            FeedbackAction::ClosedForm(ClosedForm::ProductionMean { mean_z2 }) => {
                for (o, v) in out.iter_mut().zip(z_t) {
                    *o = v + mean_z2;
                }
            }
            FeedbackAction::ClosedForm(ClosedForm::Custom { f, .. }) => f(t, x, z_t, out),
        }
        Ok(())
    }

    /// Reverse sweep after [`Rollout::forward`]. `on_control(t, g_a, g_x)`
    /// receives the gradient of `scale * cost` with respect to the applied
    /// control `a_t` and may add further contributions to the gradient with
    /// respect to `x_t`.
    pub(crate) fn backward<F>(
        &mut self,
        problem: &ControlProblem,
        z: PathRef<'_>,
        scale: f64,
        mut on_control: F,
    ) -> Result<()>
    where
        F: FnMut(usize, &[f64], &mut [f64], &mut [ForwardCache], &[f64]) -> Result<()>,
    {
        let (sd, cd) = (self.sd, self.cd);
        self.g_x.iter_mut().for_each(|v| *v = 0.0);
        problem
            .model
            .terminal_cost_grad(&self.states[self.horizon * sd..], scale, &mut self.g_x);
        for t in (0..self.horizon).rev() {
            self.g_prev.iter_mut().for_each(|v| *v = 0.0);
            self.g_a.iter_mut().for_each(|v| *v = 0.0);
            let x = &self.states[t * sd..(t + 1) * sd];
            let a = &self.controls[t * cd..(t + 1) * cd];
            problem.model.step_vjp(
                t,
                x,
                z.point(t + 1),
                a,
                &self.g_x,
                &mut self.g_prev,
                &mut self.g_a,
            );
            problem
                .model
                .running_cost_grad(t, x, a, scale, &mut self.g_prev, &mut self.g_a);
            on_control(
                t,
                &self.g_a,
                &mut self.g_prev,
                &mut self.caches,
                &self.raw[t * cd..(t + 1) * cd],
            )?;
            std::mem::swap(&mut self.g_x, &mut self.g_prev);
        }
        Ok(())
    }

    /// Accumulates `scale * d cost / d theta` for every network of `policy`
    /// into `grads` (one buffer per network). Gradients are zeroed on clipped
    /// output components.
    pub(crate) fn backward_network(
        &mut self,
        problem: &ControlProblem,
        policy: &NetworkPolicy,
        z: PathRef<'_>,
        scale: f64,
        grads: &mut [Vec<f64>],
    ) -> Result<()> {
        let state_off = policy.state_input_offset();
        let mut masked = vec![0.0; self.cd];
        let mut g_in = std::mem::take(&mut self.g_in);
        let sd = self.sd;
        let res = self.backward(problem, z, scale, |t, g_a, g_x, caches, raw| {
            let Some(i) = policy.slots[t] else {
                return Ok(());
            };
            let bx = &problem.control_box[t];
            for (k, m) in masked.iter_mut().enumerate() {
                *m = if bx.passes_gradient(k, raw[k]) { g_a[k] } else { 0.0 };
            }
            let net = &policy.nets[i];
            match state_off {
                Some(off) => {
                    g_in.clear();
                    g_in.resize(net.input_dim(), 0.0);
                    net.backward_accumulate(&mut caches[t], &masked, &mut grads[i], Some(&mut g_in))?;
                    for (g, v) in g_x.iter_mut().zip(&g_in[off..off + sd]) {
                        *g += v;
                    }
                }
                None => net.backward_accumulate(&mut caches[t], &masked, &mut grads[i], None)?,
            }
            Ok(())
        });
        self.g_in = g_in;
        res
    }

    /// Gradient of `cost` with respect to the applied controls, flattened
    /// `T x control_dim`, written into `out`.
    pub(crate) fn backward_controls(
        &mut self,
        problem: &ControlProblem,
        z: PathRef<'_>,
        scale: f64,
        out: &mut [f64],
    ) -> Result<()> {
        let cd = self.cd;
        self.backward(problem, z, scale, |t, g_a, _, _, _| {
            out[t * cd..(t + 1) * cd].copy_from_slice(g_a);
            Ok(())
        })
    }

    pub(crate) fn state_path(&self) -> StatePath {
        StatePath {
            states: self.states.chunks(self.sd).map(<[f64]>::to_vec).collect(),
            controls: self.controls.chunks(self.cd).map(<[f64]>::to_vec).collect(),
        }
    }
}

fn check_path(problem: &ControlProblem, z: PathRef<'_>) -> Result<()> {
    if z.noise_dim() != problem.noise_dim {
        return Err(Error::Dimension {
            what: "noise dimension",
            expected: problem.noise_dim,
            got: z.noise_dim(),
        });
    }
    if z.horizon() != problem.horizon {
        return Err(Error::Dimension {
            what: "trajectory length",
            expected: problem.horizon,
            got: z.horizon(),
        });
    }
    Ok(())
}

pub(crate) fn check_set(problem: &ControlProblem, set: &TrainingSet) -> Result<()> {
    if set.is_empty() {
        return Err(Error::config("empty training set"));
    }
    check_path(problem, set.path(0))
}

/// Simulates the controlled state along `z`.
pub fn simulate_state<'a>(
    problem: &ControlProblem,
    action: &FeedbackAction,
    z: impl Into<PathRef<'a>>,
) -> Result<StatePath> {
    let z = z.into();
    check_path(problem, z)?;
    action.check(problem)?;
    let mut ws = Rollout::new(problem);
    ws.forward(problem, action, z)?;
    Ok(ws.state_path())
}

/// Running plus terminal cost of `action` along `z`.
pub fn pathwise_cost<'a>(
    problem: &ControlProblem,
    action: &FeedbackAction,
    z: impl Into<PathRef<'a>>,
) -> Result<f64> {
    let z = z.into();
    check_path(problem, z)?;
    action.check(problem)?;
    Rollout::new(problem).forward(problem, action, z)
}

/// Gradient of the pathwise cost of `action` along `z` with respect to the
/// applied (clipped) controls; `out[t]` belongs to `a_t`. The dependence of
/// later controls on earlier states is not included.
pub fn control_gradient<'a>(
    problem: &ControlProblem,
    action: &FeedbackAction,
    z: impl Into<PathRef<'a>>,
) -> Result<Vec<Vec<f64>>> {
    let z = z.into();
    check_path(problem, z)?;
    action.check(problem)?;
    let mut ws = Rollout::new(problem);
    ws.forward(problem, action, z)?;
    let mut flat = vec![0.0; problem.horizon * problem.control_dim];
    ws.backward_controls(problem, z, 1.0, &mut flat)?;
    Ok(flat.chunks(problem.control_dim).map(<[f64]>::to_vec).collect())
}

/// Pathwise costs of every trajectory in the set, in index order.
pub fn pathwise_costs(
    problem: &ControlProblem,
    action: &FeedbackAction,
    set: &TrainingSet,
) -> Result<Vec<f64>> {
    check_set(problem, set)?;
    action.check(problem)?;
    const CHUNK: usize = 4096;
    let chunks: Vec<Result<Vec<f64>>> = (0..set.len())
        .collect::<Vec<_>>()
        .par_chunks(CHUNK)
        .map_init(
            || Rollout::new(problem),
            |ws, idx| {
                idx.iter()
                    .map(|&i| ws.forward(problem, action, set.path(i)))
                    .collect()
            },
        )
        .collect();
    let mut costs = Vec::with_capacity(set.len());
    for c in chunks {
        costs.extend(c?);
    }
    Ok(costs)
}

/// Mean pathwise cost over the set. Costs are summed with compensation in
/// sorted order, so the value is independent of the order of the set.
pub fn empirical_loss(
    problem: &ControlProblem,
    action: &FeedbackAction,
    set: &TrainingSet,
) -> Result<f64> {
    let mut costs = pathwise_costs(problem, action, set)?;
    Ok(stats::canonical_mean(&mut costs))
}

/// Monte Carlo estimate of the expected cost on a fresh i.i.d. sample:
/// returns `(mean, standard error of the mean)`.
pub fn mc_performance(
    problem: &ControlProblem,
    action: &FeedbackAction,
    samplers: &SamplerRegistry,
    sampler_id: &str,
    n_eval: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_eval < 2 {
        return Err(Error::config("n_eval must be at least 2"));
    }
    let sampler = samplers.get(sampler_id)?;
    if sampler.horizon() != problem.horizon || sampler.noise_dim() != problem.noise_dim {
        return Err(Error::config(format!(
            "sampler `{sampler_id}` does not match problem `{}`",
            problem.name
        )));
    }
    action.check(problem)?;
    const CHUNK: usize = 4096;
    let stride = problem.horizon * problem.noise_dim;
    let starts: Vec<usize> = (0..n_eval).step_by(CHUNK).collect();
    let chunks: Vec<Result<Vec<f64>>> = starts
        .par_iter()
        .map(|&s| {
            let mut ws = Rollout::new(problem);
            let mut buf = vec![0.0; stride];
            (s..(s + CHUNK).min(n_eval))
                .map(|i| {
                    sampler.sample_path(seed, i as u64, &mut buf);
                    ws.forward(problem, action, PathRef::new(&buf, problem.noise_dim))
                })
                .collect()
        })
        .collect();
    let mut costs = Vec::with_capacity(n_eval);
    for c in chunks {
        costs.extend(c?);
    }
    let mean = stats::canonical_mean(&mut costs);
    let sd = stats::sample_std(&costs).unwrap_or(0.0);
    Ok((mean, sd / (n_eval as f64).sqrt()))
}
