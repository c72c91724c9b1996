//! Overlearning diagnostics.
//!
//! * [`pathwise_optimum`] and [`v_star_empirical`]: the per-trajectory
//!   minimum over constant control sequences and its training-set average,
//!   the floor an overlearning network approaches.
//! * [`partition_training_set`] and [`v_bar_star`]: the same floor when
//!   trajectories share values at some time and must share a control.
//! * [`empirical_rademacher`] and [`complexity_bounds`]: capacity of the
//!   trained class and the resulting uniform deviation bounds.
//! * [`relative_performance`]: certainty-equivalent gaps between a trained
//!   action and the closed-form optimum, in and out of sample.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{
    check_set, empirical_loss, ControlProblem, FeedbackAction, PathRef, Rollout, TrainingSet,
};
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamConfig, AdamState, NetConfig, NetworkPolicy};
use crate::problems::certainty_equivalent;
use crate::rng;
use crate::stats::{self, serde_f64};
use crate::trainer::{weighted_gradient, zero_grads};

/// Settings of the multi-start projected gradient search over constant
/// control sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathwiseConfig {
    pub max_iter: usize,
    /// Starts drawn uniformly from the box, on top of corners and center.
    pub random_starts: usize,
    /// At most `2^max_corner_bits` corners are used as starts; beyond that
    /// the corners are sampled at random.
    pub max_corner_bits: u32,
    /// Stop once one accepted step decreases the cost by less than this.
    pub tolerance: f64,
    pub seed: u64,
    /// Use a problem's exact per-trajectory solver when it has one.
    pub use_exact: bool,
}

impl Default for PathwiseConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            random_starts: 8,
            max_corner_bits: 10,
            tolerance: 1e-8,
            seed: 0,
            use_exact: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathwiseOptimum {
    pub alpha_star: Vec<Vec<f64>>,
    pub cost: f64,
    pub converged: bool,
    pub starts: usize,
    /// Accepted gradient steps over all starts.
    pub iterations: usize,
    pub exact: bool,
}

/// Mean of pathwise optima with a flag telling whether every inner search
/// converged. An unconverged value is still an upper bound on the infimum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FloorEstimate {
    pub value: f64,
    pub converged: bool,
    pub unconverged: usize,
}

struct Objective<'a> {
    problem: &'a ControlProblem,
    paths: &'a [PathRef<'a>],
    ws: Rollout,
    grad: Vec<f64>,
    alpha: FeedbackAction,
}

impl<'a> Objective<'a> {
    fn new(problem: &'a ControlProblem, paths: &'a [PathRef<'a>]) -> Self {
        Self {
            problem,
            paths,
            ws: Rollout::new(problem),
            grad: vec![0.0; problem.horizon * problem.control_dim],
            alpha: FeedbackAction::zero(problem),
        }
    }

    fn load(&mut self, flat: &[f64]) {
        let cd = self.problem.control_dim;
        if let FeedbackAction::Constant(a) = &mut self.alpha {
            for (t, row) in a.iter_mut().enumerate() {
                row.copy_from_slice(&flat[t * cd..(t + 1) * cd]);
            }
        }
    }

    /// Group-mean cost; overflow counts as an infinite cost.
    fn value(&mut self, flat: &[f64]) -> Result<f64> {
        self.load(flat);
        let w = 1.0 / self.paths.len() as f64;
        let mut total = 0.0;
        for &z in self.paths {
            match self.ws.forward(self.problem, &self.alpha, z) {
                Ok(c) => total += w * c,
                Err(Error::NumericOverflow { .. } | Error::Numeric(_)) => return Ok(f64::INFINITY),
                Err(e) => return Err(e),
            }
        }
        Ok(total)
    }

    /// Value and gradient with respect to the flat control sequence.
    fn value_grad(&mut self, flat: &[f64], grad: &mut [f64]) -> Result<f64> {
        self.load(flat);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let w = 1.0 / self.paths.len() as f64;
        let mut total = 0.0;
        for &z in self.paths {
            total += w * self.ws.forward(self.problem, &self.alpha, z)?;
            self.ws.backward_controls(self.problem, z, w, &mut self.grad)?;
            for (g, v) in grad.iter_mut().zip(&self.grad) {
                *g += v;
            }
        }
        Ok(total)
    }
}

struct FlatBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
    free: Vec<usize>,
}

impl FlatBox {
    fn new(problem: &ControlProblem) -> Result<Self> {
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        for b in &problem.control_box {
            lower.extend_from_slice(&b.lower);
            upper.extend_from_slice(&b.upper);
        }
        let free: Vec<usize> = (0..lower.len()).filter(|&k| lower[k] < upper[k]).collect();
        if free.iter().any(|&k| !lower[k].is_finite() || !upper[k].is_finite()) {
            return Err(Error::config(
                "pathwise optimization needs a bounded control box",
            ));
        }
        Ok(Self { lower, upper, free })
    }

    fn project(&self, x: &mut [f64]) {
        for ((v, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }

    fn starts(&self, cfg: &PathwiseConfig) -> Vec<Vec<f64>> {
        let mut r = rng::seeded(cfg.seed);
        let base: Vec<f64> = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect();
        let mut out = Vec::new();
        let k = self.free.len();
        let corner = |bits: &dyn Fn(usize) -> bool| {
            let mut c = base.clone();
            for (j, &i) in self.free.iter().enumerate() {
                c[i] = if bits(j) { self.upper[i] } else { self.lower[i] };
            }
            c
        };
        if k as u32 <= cfg.max_corner_bits {
            for mask in 0..(1u64 << k) {
                out.push(corner(&|j| mask >> j & 1 == 1));
            }
        } else {
            for _ in 0..(1u64 << cfg.max_corner_bits) {
                let bits: Vec<bool> = (0..k).map(|_| r.gen_bool(0.5)).collect();
                out.push(corner(&|j| bits[j]));
            }
        }
        out.push(base.clone());
        for _ in 0..cfg.random_starts {
            let mut c = base.clone();
            for &i in &self.free {
                c[i] = r.gen_range(self.lower[i]..=self.upper[i]);
            }
            out.push(c);
        }
        out
    }
}

/// Projected gradient descent with backtracking from one start.
fn descend(
    obj: &mut Objective<'_>,
    bx: &FlatBox,
    mut x: Vec<f64>,
    cfg: &PathwiseConfig,
) -> Result<(Vec<f64>, f64, bool, usize)> {
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut f = obj.value_grad(&x, &mut g)?;
    let mut eta = 1.0;
    for it in 0..cfg.max_iter {
        let fy = loop {
            for k in 0..n {
                y[k] = x[k] - eta * g[k];
            }
            bx.project(&mut y);
            let mut lin = 0.0;
            let mut sq = 0.0;
            for k in 0..n {
                let d = y[k] - x[k];
                lin += g[k] * d;
                sq += d * d;
            }
            if sq == 0.0 {
                return Ok((x, f, true, it));
            }
            let fy = obj.value(&y)?;
            if fy <= f + lin + sq / (2.0 * eta) {
                break fy;
            }
            eta *= 0.5;
            if eta < 1e-20 {
                return Ok((x, f, true, it));
            }
        };
        let decrease = f - fy;
        std::mem::swap(&mut x, &mut y);
        f = obj.value_grad(&x, &mut g)?;
        debug_assert!(f == fy);
        eta *= 2.0;
        if decrease < cfg.tolerance {
            return Ok((x, f, true, it + 1));
        }
    }
    Ok((x, f, false, cfg.max_iter))
}

fn minimize_constant(
    problem: &ControlProblem,
    paths: &[PathRef<'_>],
    cfg: &PathwiseConfig,
) -> Result<PathwiseOptimum> {
    let bx = FlatBox::new(problem)?;
    let mut obj = Objective::new(problem, paths);
    let starts = bx.starts(cfg);
    let mut best: Option<(Vec<f64>, f64, bool)> = None;
    let mut iterations = 0;
    for s in &starts {
        let f0 = obj.value(s)?;
        if !f0.is_finite() {
            continue;
        }
        let (x, f, conv, it) = descend(&mut obj, &bx, s.clone(), cfg)?;
        iterations += it;
        if best.as_ref().is_none_or(|b| f < b.1) {
            best = Some((x, f, conv));
        }
    }
    let (x, cost, converged) =
        best.ok_or_else(|| Error::Numeric("every start of the pathwise search overflowed".into()))?;
    let cd = problem.control_dim;
    Ok(PathwiseOptimum {
        alpha_star: x.chunks(cd).map(<[f64]>::to_vec).collect(),
        cost,
        converged,
        starts: starts.len(),
        iterations,
        exact: false,
    })
}

fn check_path(problem: &ControlProblem, z: PathRef<'_>) -> Result<()> {
    if z.noise_dim() != problem.noise_dim || z.horizon() != problem.horizon {
        return Err(Error::Dimension {
            what: "trajectory length",
            expected: problem.horizon * problem.noise_dim,
            got: z.data().len(),
        });
    }
    Ok(())
}

/// Minimum of the pathwise cost over constant control sequences in the box.
pub fn pathwise_optimum<'a>(
    problem: &ControlProblem,
    z: impl Into<PathRef<'a>>,
    cfg: &PathwiseConfig,
) -> Result<PathwiseOptimum> {
    let z = z.into();
    check_path(problem, z)?;
    if cfg.use_exact {
        if let Some(alpha) = problem.model.exact_pathwise(problem, z) {
            let action = FeedbackAction::Constant(alpha.clone());
            let cost = Rollout::new(problem).forward(problem, &action, z)?;
            return Ok(PathwiseOptimum {
                alpha_star: alpha,
                cost,
                converged: true,
                starts: 0,
                iterations: 0,
                exact: true,
            });
        }
    }
    minimize_constant(problem, &[z], cfg)
}

fn floor_of(results: Vec<(f64, bool)>, weights: Option<&[f64]>) -> FloorEstimate {
    let unconverged = results.iter().filter(|r| !r.1).count();
    let mut vals: Vec<f64> = match weights {
        None => results.iter().map(|r| r.0).collect(),
        Some(w) => results
            .iter()
            .zip(w)
            .map(|(r, w)| r.0 * w * results.len() as f64)
            .collect(),
    };
    FloorEstimate {
        value: stats::canonical_mean(&mut vals),
        converged: unconverged == 0,
        unconverged,
    }
}

/// Training-set average of the pathwise optima.
pub fn v_star_empirical(
    problem: &ControlProblem,
    set: &TrainingSet,
    cfg: &PathwiseConfig,
) -> Result<FloorEstimate> {
    check_set(problem, set)?;
    let results: Result<Vec<(f64, bool)>> = (0..set.len())
        .into_par_iter()
        .map(|i| pathwise_optimum(problem, set.path(i), cfg).map(|o| (o.cost, o.converged)))
        .collect();
    Ok(floor_of(results?, None))
}

/// Groups of trajectories that are linked, directly or through a chain,
/// by coinciding at some time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    /// Each group is sorted; groups are ordered by their smallest index.
    pub groups: Vec<Vec<usize>>,
    pub link_tolerance: f64,
}

impl Partition {
    pub fn singletons(n: usize) -> Self {
        Self {
            groups: (0..n).map(|i| vec![i]).collect(),
            link_tolerance: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Checks that the groups are disjoint, cover the set and are closed
    /// under linking, by pairwise comparison.
    pub fn validate(&self, set: &TrainingSet) -> Result<()> {
        let n = set.len();
        let mut owner = vec![usize::MAX; n];
        for (g, members) in self.groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::config(format!("group {g} is empty")));
            }
            for &i in members {
                if i >= n {
                    return Err(Error::config(format!("index {i} outside a set of {n}")));
                }
                if owner[i] != usize::MAX {
                    return Err(Error::config(format!("trajectory {i} is in two groups")));
                }
                owner[i] = g;
            }
        }
        if let Some(i) = owner.iter().position(|&o| o == usize::MAX) {
            return Err(Error::config(format!("trajectory {i} is in no group")));
        }
        for i in 0..n {
            for j in i + 1..n {
                if owner[i] != owner[j] && linked(set, i, j, self.link_tolerance) {
                    return Err(Error::config(format!(
                        "trajectories {i} and {j} coincide at some time but are in different groups"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn linked(set: &TrainingSet, i: usize, j: usize, tol: f64) -> bool {
    let (a, b) = (set.path(i), set.path(j));
    (1..=set.horizon()).any(|t| {
        let d2: f64 = a
            .point(t)
            .iter()
            .zip(b.point(t))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        d2.sqrt() <= tol
    })
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut i: usize) -> usize {
        while self.0[i] != i {
            self.0[i] = self.0[self.0[i]];
            i = self.0[i];
        }
        i
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.0[hi] = lo;
        }
    }
}

fn key_bits(v: &[f64]) -> Vec<u64> {
    v.iter()
        .map(|x| if *x == 0.0 { 0 } else { x.to_bits() })
        .collect()
}

/// Finest partition closed under linking: trajectories `i` and `j` are
/// linked when `|z_t(i) - z_t(j)| <= link_tolerance` for some `t`, and
/// groups are the connected components. With tolerance zero, distinct data
/// gives singletons.
pub fn partition_training_set(set: &TrainingSet, link_tolerance: f64) -> Result<Partition> {
    if !(link_tolerance >= 0.0) {
        return Err(Error::config("link tolerance must be non-negative"));
    }
    let n = set.len();
    let mut uf = UnionFind((0..n).collect());
    if link_tolerance == 0.0 {
        for t in 1..=set.horizon() {
            let mut seen: HashMap<Vec<u64>, usize> = HashMap::with_capacity(n);
            for i in 0..n {
                let key = key_bits(set.path(i).point(t));
                match seen.get(&key) {
                    Some(&j) => uf.union(i, j),
                    None => {
                        seen.insert(key, i);
                    }
                }
            }
        }
    } else {
        for i in 0..n {
            for j in i + 1..n {
                if linked(set, i, j, link_tolerance) {
                    uf.union(i, j);
                }
            }
        }
    }
    let mut by_root: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        let r = uf.find(i);
        by_root[r].push(i);
    }
    Ok(Partition {
        groups: by_root.into_iter().filter(|g| !g.is_empty()).collect(),
        link_tolerance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupWeighting {
    /// Every group counts `1/m`.
    #[default]
    Equal,
    /// Group `j` counts `|K_j| / n`.
    SizeWeighted,
}

/// Average over groups of the minimal group-mean cost, one constant control
/// sequence per group.
pub fn v_bar_star(
    problem: &ControlProblem,
    set: &TrainingSet,
    partition: &Partition,
    cfg: &PathwiseConfig,
    weighting: GroupWeighting,
) -> Result<FloorEstimate> {
    check_set(problem, set)?;
    partition.validate(set)?;
    let results: Result<Vec<(f64, bool)>> = partition
        .groups
        .par_iter()
        .map(|g| {
            let opt = if g.len() == 1 {
                pathwise_optimum(problem, set.path(g[0]), cfg)?
            } else {
                let paths: Vec<PathRef<'_>> = g.iter().map(|&i| set.path(i)).collect();
                minimize_constant(problem, &paths, cfg)?
            };
            Ok((opt.cost, opt.converged))
        })
        .collect();
    let results = results?;
    Ok(match weighting {
        GroupWeighting::Equal => floor_of(results, None),
        GroupWeighting::SizeWeighted => {
            let w: Vec<f64> = partition
                .groups
                .iter()
                .map(|g| g.len() as f64 / set.len() as f64)
                .collect();
            floor_of(results, Some(&w))
        }
    })
}

/// Gradient-ascent settings for the supremum inside the Rademacher average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RademacherConfig {
    /// Full-batch Adam steps per start; zero evaluates the initial
    /// parameters only.
    pub steps: usize,
    pub starts: usize,
    pub lr: f64,
    /// Maximize `|(1/n) sum sigma_i l_i|` instead of the signed average.
    pub absolute: bool,
}

impl Default for RademacherConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            starts: 2,
            lr: 0.01,
            absolute: true,
        }
    }
}

/// Best parameters found for one sign draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RademacherWitness {
    pub start: usize,
    pub step: usize,
    /// Parameters of every network, concatenated in network order.
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RademacherEstimate {
    pub r_hat: f64,
    pub m_samples: usize,
    pub per_draw: Vec<f64>,
    pub witnesses: Vec<RademacherWitness>,
    pub std_error: f64,
    /// Draws dropped because the objective became non-finite.
    pub skipped: usize,
    /// The supremum is approximated from below, so `r_hat` is too.
    pub is_lower_bound: bool,
}

fn flatten(policy: &NetworkPolicy) -> Vec<f64> {
    policy.nets.iter().flat_map(|n| n.params().iter().copied()).collect()
}

fn best_correlation(
    problem: &ControlProblem,
    net_config: &NetConfig,
    set: &TrainingSet,
    sigma: &[f64],
    cfg: &RademacherConfig,
    draw: usize,
) -> Result<Option<(f64, RademacherWitness)>> {
    let n = set.len() as f64;
    let weights: Vec<f64> = sigma.iter().map(|s| s / n).collect();
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut ws = Rollout::new(problem);
    let mut best: Option<(f64, RademacherWitness)> = None;
    let adam_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    for start in 0..cfg.starts.max(1) {
        let mut nc = net_config.clone();
        if start > 0 {
            nc.seed = rng::derive_seed(&[net_config.seed, draw as u64, start as u64]);
        }
        let mut policy = NetworkPolicy::init(problem, &nc)?;
        let mut adam: Vec<AdamState> = policy
            .nets
            .iter()
            .map(|n| AdamState::new(n.len(), adam_cfg))
            .collect();
        let mut grads = zero_grads(&policy);
        for step in 0..=cfg.steps {
            grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
            let j = match weighted_gradient(problem, &policy, set, &idx, Some(&weights), &mut grads, &mut ws) {
                Ok(j) if j.is_finite() => j,
                Ok(_) | Err(Error::Numeric(_) | Error::NumericOverflow { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let value = if cfg.absolute { j.abs() } else { j };
            if best.as_ref().is_none_or(|b| value > b.0) {
                best = Some((
                    value,
                    RademacherWitness {
                        start,
                        step,
                        params: flatten(&policy),
                    },
                ));
            }
            if step == cfg.steps {
                break;
            }
            // Ascent on the (signed) objective through a descent optimizer.
            let dir = if cfg.absolute && j < 0.0 { 1.0 } else { -1.0 };
            for ((net, g), st) in policy.nets.iter_mut().zip(&mut grads).zip(&mut adam) {
                g.iter_mut().for_each(|v| *v *= dir);
                if adam_step(net.params_mut(), g, st).is_err() {
                    return Ok(None);
                }
            }
        }
    }
    Ok(best)
}

/// Monte Carlo estimate of the empirical Rademacher complexity of the
/// pathwise-cost class induced by networks of the given architecture.
pub fn empirical_rademacher(
    problem: &ControlProblem,
    net_config: &NetConfig,
    set: &TrainingSet,
    m_samples: usize,
    cfg: &RademacherConfig,
    seed: u64,
) -> Result<RademacherEstimate> {
    check_set(problem, set)?;
    net_config.validate()?;
    if m_samples == 0 {
        return Err(Error::config("m_samples must be at least 1"));
    }
    let draws: Result<Vec<Option<(f64, RademacherWitness)>>> = (0..m_samples)
        .into_par_iter()
        .map(|k| {
            let mut r = ChaCha8Rng::seed_from_u64(rng::derive_seed(&[seed, k as u64]));
            let sigma: Vec<f64> = (0..set.len())
                .map(|_| if r.gen_bool(0.5) { 1.0 } else { -1.0 })
                .collect();
            best_correlation(problem, net_config, set, &sigma, cfg, k)
        })
        .collect();
    let mut per_draw = Vec::new();
    let mut witnesses = Vec::new();
    let mut skipped = 0;
    for d in draws? {
        match d {
            Some((v, w)) => {
                per_draw.push(v);
                witnesses.push(w);
            }
            None => skipped += 1,
        }
    }
    if per_draw.is_empty() {
        return Err(Error::Numeric("every Rademacher draw was non-finite".into()));
    }
    let r_hat = stats::mean(&per_draw);
    let std_error = stats::sample_std(&per_draw).map_or(0.0, |s| s / (per_draw.len() as f64).sqrt());
    Ok(RademacherEstimate {
        r_hat,
        m_samples,
        per_draw,
        witnesses,
        std_error,
        skipped,
        is_lower_bound: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityBounds {
    /// `2 r + 2 c* sqrt(ln(2/delta) / (2n))`
    pub c_nu: f64,
    /// `2 r + 6 c* sqrt(ln(2/delta) / n)`
    pub c_e: f64,
    /// Set when `r` came from an estimate that is itself a lower bound.
    pub from_lower_bound: bool,
}

/// Deviation bounds holding with probability at least `1 - delta` for a
/// class with complexity `r` and costs bounded by `c_star`.
pub fn complexity_bounds(r: f64, c_star: f64, n: usize, delta: f64) -> Result<ComplexityBounds> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    if n == 0 {
        return Err(Error::Domain("n must be at least 1".into()));
    }
    if !(c_star > 0.0) || !r.is_finite() {
        return Err(Error::Domain(format!(
            "need c* > 0 and finite r (got c* = {c_star}, r = {r})"
        )));
    }
    let l = (2.0 / delta).ln();
    let n = n as f64;
    Ok(ComplexityBounds {
        c_nu: 2.0 * r + 2.0 * c_star * (l / (2.0 * n)).sqrt(),
        c_e: 2.0 * r + 6.0 * c_star * (l / n).sqrt(),
        from_lower_bound: false,
    })
}

impl RademacherEstimate {
    pub fn bounds(&self, c_star: f64, n: usize, delta: f64) -> Result<ComplexityBounds> {
        let mut b = complexity_bounds(self.r_hat, c_star, n, delta)?;
        b.from_lower_bound = self.is_lower_bound;
        Ok(b)
    }
}

/// In/out-of-sample comparison of a trained action with the optimum. Values
/// `p_in`, `p_out` and `gap` are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    #[serde(with = "serde_f64")]
    pub p_in: f64,
    #[serde(with = "serde_f64")]
    pub p_out: f64,
    #[serde(with = "serde_f64")]
    pub gap: f64,
    #[serde(with = "serde_f64")]
    pub nn_in: f64,
    #[serde(with = "serde_f64")]
    pub nn_out: f64,
    #[serde(with = "serde_f64")]
    pub true_in: f64,
    #[serde(with = "serde_f64")]
    pub true_out: f64,
    #[serde(with = "serde_f64")]
    pub loss_nn_in: f64,
    #[serde(with = "serde_f64")]
    pub loss_nn_out: f64,
    #[serde(with = "serde_f64")]
    pub loss_true_in: f64,
    #[serde(with = "serde_f64")]
    pub loss_true_out: f64,
    /// `|L(trained; train) - L(trained; test)|`
    #[serde(with = "serde_f64")]
    pub o_hat: f64,
    /// Some loss reached the utility supremum and its certainty equivalent
    /// is reported as `+inf`.
    pub infinite_ce: bool,
}

/// Certainty equivalents of both actions on both sets for exponential
/// utility with risk aversion `lambda`, where the utility of a loss `L` is
/// `-L`. `p = (ce_nn - ce_true) / |ce_true|` in percent.
pub fn relative_performance(
    problem: &ControlProblem,
    trained: &FeedbackAction,
    oracle: &FeedbackAction,
    train_set: &TrainingSet,
    test_set: &TrainingSet,
    lambda: f64,
) -> Result<GapReport> {
    let loss_nn_in = empirical_loss(problem, trained, train_set)?;
    let loss_nn_out = empirical_loss(problem, trained, test_set)?;
    let loss_true_in = empirical_loss(problem, oracle, train_set)?;
    let loss_true_out = empirical_loss(problem, oracle, test_set)?;
    let mut infinite_ce = false;
    let mut ce = |loss: f64| -> Result<f64> {
        match certainty_equivalent(-loss, lambda) {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(_) | Err(Error::Domain(_)) if lambda > 0.0 => {
                infinite_ce = true;
                Ok(f64::INFINITY)
            }
            Ok(v) => Ok(v),
            Err(e) => Err(e),
        }
    };
    let nn_in = ce(loss_nn_in)?;
    let nn_out = ce(loss_nn_out)?;
    let true_in = ce(loss_true_in)?;
    let true_out = ce(loss_true_out)?;
    let p_in = 100.0 * (nn_in - true_in) / true_in.abs();
    let p_out = 100.0 * (nn_out - true_out) / true_out.abs();
    Ok(GapReport {
        p_in,
        p_out,
        gap: p_in - p_out,
        nn_in,
        nn_out,
        true_in,
        true_out,
        loss_nn_in,
        loss_nn_out,
        loss_true_in,
        loss_true_out,
        o_hat: (loss_nn_in - loss_nn_out).abs(),
        infinite_ce,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::{pathwise_cost, ControlBox, Trajectory};
    use crate::nn::InputMode;
    use crate::problems::{
        merton_closed_form, merton_problem, production_problem, sample_training_set, MertonParams,
        ProductionParams,
    };

    fn production() -> ControlProblem {
        production_problem(&ProductionParams::default()).unwrap().problem
    }

    #[test]
    fn production_example_optimum() {
        let p = production();
        let z = Trajectory::scalar(&[1.0, -0.3]).unwrap();
        for use_exact in [true, false] {
            let cfg = PathwiseConfig {
                use_exact,
                ..PathwiseConfig::default()
            };
            let o = pathwise_optimum(&p, &z, &cfg).unwrap();
            assert!((o.alpha_star[1][0] - 0.7).abs() < 1e-9, "{o:?}");
            assert!(o.cost.abs() < 1e-15);
            assert_eq!(o.exact, use_exact);
        }
    }

    #[test]
    fn merton_corner_matches_grid_search() {
        let inst = merton_problem(&MertonParams::default_with_dim(1), 20.0).unwrap();
        let p = inst.problem;
        let z = Trajectory::scalar(&[0.3, 0.05]).unwrap();
        let o = pathwise_optimum(&p, &z, &PathwiseConfig::default()).unwrap();
        assert_eq!(o.alpha_star[1], vec![20.0]);
        let expect = (-(0.3 + 20.0 * 0.05f64)).exp() - 1.0;
        assert!((o.cost - expect).abs() < 1e-15);
        let mut grid_best = f64::INFINITY;
        for k in 0..=40_000 {
            let a = -20.0 + k as f64 * 1e-3;
            let act = FeedbackAction::Constant(vec![vec![1.0], vec![a]]);
            grid_best = grid_best.min(pathwise_cost(&p, &act, &z).unwrap());
        }
        assert!(o.cost <= grid_best + 1e-15);
        let generic = pathwise_optimum(
            &p,
            &z,
            &PathwiseConfig {
                use_exact: false,
                ..PathwiseConfig::default()
            },
        )
        .unwrap();
        assert!((generic.cost - o.cost).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_gives_uncontrolled_cost() {
        let mut p = production();
        p.control_box[1] = ControlBox::point(vec![0.0]);
        let z = Trajectory::scalar(&[0.8, 0.5]).unwrap();
        for use_exact in [true, false] {
            let cfg = PathwiseConfig {
                use_exact,
                ..PathwiseConfig::default()
            };
            let o = pathwise_optimum(&p, &z, &cfg).unwrap();
            assert_eq!(o.alpha_star[1], vec![0.0]);
            assert!((o.cost - 1.3f64 * 1.3).abs() < 1e-12);
        }
    }

    #[test]
    fn unbounded_box_rejected_for_generic_search() {
        let inst = merton_problem(&MertonParams::default_with_dim(2), f64::INFINITY).unwrap();
        let set = sample_training_set(inst.sampler.as_ref(), 1, 0).unwrap();
        let cfg = PathwiseConfig {
            use_exact: false,
            ..PathwiseConfig::default()
        };
        assert!(pathwise_optimum(&inst.problem, set.path(0), &cfg).is_err());
    }

    #[test]
    fn production_v_star_is_zero() {
        let inst = production_problem(&ProductionParams::default()).unwrap();
        let set = sample_training_set(inst.sampler.as_ref(), 50, 3).unwrap();
        let v = v_star_empirical(&inst.problem, &set, &PathwiseConfig::default()).unwrap();
        assert_eq!(v.value, 0.0);
        assert!(v.converged);
        let one = set.select(&[7]).unwrap();
        let v1 = v_star_empirical(&inst.problem, &one, &PathwiseConfig::default()).unwrap();
        let o = pathwise_optimum(&inst.problem, set.path(7), &PathwiseConfig::default()).unwrap();
        assert_eq!(v1.value, o.cost);
    }

    #[test]
    fn merton_v_star_below_closed_form_loss() {
        let params = MertonParams::default_with_dim(5);
        let inst = merton_problem(&params, 20.0).unwrap();
        let set = sample_training_set(inst.sampler.as_ref(), 200, 11).unwrap();
        let v = v_star_empirical(&inst.problem, &set, &PathwiseConfig::default()).unwrap();
        let (a_star, _) = merton_closed_form(&params).unwrap();
        let act = FeedbackAction::Constant(vec![vec![0.2; 5], a_star]);
        let l = empirical_loss(&inst.problem, &act, &set).unwrap();
        assert!(v.value < l);
    }

    fn set_from(rows: &[[f64; 2]]) -> TrainingSet {
        let trajs: Vec<Trajectory> = rows.iter().map(|r| Trajectory::scalar(r).unwrap()).collect();
        TrainingSet::from_trajectories(&trajs, 0, "manual").unwrap()
    }

    #[test]
    fn partition_examples() {
        let distinct = set_from(&[[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]]);
        let p = partition_training_set(&distinct, 0.0).unwrap();
        assert_eq!(p, Partition::singletons(3));

        let shared = set_from(&[[0.1, 0.2], [0.1, 0.9]]);
        assert_eq!(partition_training_set(&shared, 0.0).unwrap().groups, vec![vec![0, 1]]);

        let chain = set_from(&[[0.1, 0.2], [0.1, 0.7], [0.9, 0.7], [0.5, 0.5]]);
        let p = partition_training_set(&chain, 0.0).unwrap();
        assert_eq!(p.groups, vec![vec![0, 1, 2], vec![3]]);
        p.validate(&chain).unwrap();

        let signed_zero = set_from(&[[0.0, 0.2], [-0.0, 0.3]]);
        assert_eq!(partition_training_set(&signed_zero, 0.0).unwrap().len(), 1);

        let near = set_from(&[[0.1, 0.2], [0.1 + 1e-4, 0.9]]);
        assert_eq!(partition_training_set(&near, 0.0).unwrap().len(), 2);
        assert_eq!(partition_training_set(&near, 1e-3).unwrap().len(), 1);
        assert!(partition_training_set(&near, -1.0).is_err());
    }

    #[test]
    fn invalid_partitions_detected() {
        let set = set_from(&[[0.1, 0.2], [0.1, 0.7], [0.9, 0.8]]);
        let bad = Partition::singletons(3);
        assert!(bad.validate(&set).is_err());
        let overlap = Partition {
            groups: vec![vec![0, 1], vec![1, 2]],
            link_tolerance: 0.0,
        };
        assert!(overlap.validate(&set).is_err());
        let missing = Partition {
            groups: vec![vec![0, 1]],
            link_tolerance: 0.0,
        };
        assert!(missing.validate(&set).is_err());
    }

    #[test]
    fn v_bar_star_reductions() {
        let inst = production_problem(&ProductionParams::default()).unwrap();
        let p = &inst.problem;
        let cfg = PathwiseConfig::default();
        let set = sample_training_set(inst.sampler.as_ref(), 12, 5).unwrap();
        let singles = Partition::singletons(12);
        let vb = v_bar_star(p, &set, &singles, &cfg, GroupWeighting::Equal).unwrap();
        let vs = v_star_empirical(p, &set, &cfg).unwrap();
        assert!((vb.value - vs.value).abs() <= 1e-12);

        // Two linked groups with consistent totals z1 + z2.
        let consistent = set_from(&[[0.5, 1.0], [0.5, 1.0], [1.2, 0.8], [1.2, 0.8]]);
        let part = partition_training_set(&consistent, 0.0).unwrap();
        assert_eq!(part.len(), 2);
        let v = v_bar_star(p, &consistent, &part, &cfg, GroupWeighting::Equal).unwrap();
        assert!(v.value.abs() < 1e-12);

        // Perturbing one total leaves a group variance of the totals.
        let perturbed = set_from(&[[0.5, 1.0], [0.5, 1.4], [1.2, 0.8], [1.2, 0.8]]);
        let part = partition_training_set(&perturbed, 0.0).unwrap();
        let v = v_bar_star(p, &perturbed, &part, &cfg, GroupWeighting::Equal).unwrap();
        let totals = [1.5f64, 1.9];
        let m = 0.5 * (totals[0] + totals[1]);
        let var = 0.5 * ((totals[0] - m).powi(2) + (totals[1] - m).powi(2));
        assert!((v.value - var / 2.0).abs() < 1e-9, "{} vs {}", v.value, var / 2.0);
        let w = v_bar_star(p, &perturbed, &part, &cfg, GroupWeighting::SizeWeighted).unwrap();
        assert!((w.value - var / 2.0).abs() < 1e-9);

        // One group holding the whole set: the best single constant.
        let whole = Partition {
            groups: vec![(0..12).collect()],
            link_tolerance: 0.0,
        };
        let v = v_bar_star(p, &set, &whole, &cfg, GroupWeighting::Equal).unwrap();
        let totals: Vec<f64> = set.iter().map(|z| z.point(1)[0] + z.point(2)[0]).collect();
        let mean = stats::mean(&totals);
        let var = totals.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / 12.0;
        assert!((v.value - var).abs() < 1e-9);
    }

    #[test]
    fn size_weighting_differs_for_uneven_groups() {
        let p = production();
        let set = set_from(&[[0.5, 1.0], [0.5, 1.6], [0.5, 0.7], [1.2, 0.8]]);
        let part = partition_training_set(&set, 0.0).unwrap();
        let cfg = PathwiseConfig::default();
        let eq = v_bar_star(&p, &set, &part, &cfg, GroupWeighting::Equal).unwrap();
        let sw = v_bar_star(&p, &set, &part, &cfg, GroupWeighting::SizeWeighted).unwrap();
        let totals = [1.5f64, 2.1, 1.2];
        let m = totals.iter().sum::<f64>() / 3.0;
        let var = totals.iter().map(|t| (t - m).powi(2)).sum::<f64>() / 3.0;
        assert!((eq.value - var / 2.0).abs() < 1e-9);
        assert!((sw.value - var * 3.0 / 4.0).abs() < 1e-9);
    }

    /// `E|S_n|` for a simple symmetric random walk, computed exactly.
    fn mean_abs_walk(n: usize) -> f64 {
        let mut log_c = 0.0f64;
        let mut total = 0.0;
        for k in 0..=n {
            if k > 0 {
                log_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
            }
            let s = (2 * k) as f64 - n as f64;
            total += s.abs() * (log_c - n as f64 * 2f64.ln()).exp();
        }
        total
    }

    #[test]
    fn frozen_class_matches_walk_law() {
        // Production problem with a frozen second control: every cost is
        // the same constant, so the estimate is c E|S_n| / n.
        let mut p = production();
        p.control_box[1] = ControlBox::point(vec![0.5]);
        let z = Trajectory::scalar(&[1.0, 1.0]).unwrap();
        let trajs = vec![z; 100];
        let set = TrainingSet::from_trajectories(&trajs, 0, "const").unwrap();
        let c = 1.5f64 * 1.5;
        let net = NetConfig::new(vec![4], InputMode::Noise, 1);
        let cfg = RademacherConfig {
            steps: 10,
            starts: 1,
            lr: 0.01,
            absolute: true,
        };
        let est = empirical_rademacher(&p, &net, &set, 200, &cfg, 42).unwrap();
        let exact = c * mean_abs_walk(100) / 100.0;
        assert!((est.r_hat - exact).abs() < 3.0 * est.std_error, "{} vs {exact}", est.r_hat);
        assert!((est.r_hat - exact).abs() < 0.1 * exact);
        assert!(est.is_lower_bound);
        assert!(est.per_draw.iter().all(|&v| v >= 0.0));
        assert!((mean_abs_walk(100) - 7.958923738717876).abs() < 1e-9);
    }

    #[test]
    fn witness_reproduces_draw_value() {
        let inst = merton_problem(&MertonParams::default_with_dim(2), 20.0).unwrap();
        let set = sample_training_set(inst.sampler.as_ref(), 30, 1).unwrap();
        let net = NetConfig::new(vec![5], InputMode::Noise, 3);
        let cfg = RademacherConfig {
            steps: 5,
            starts: 2,
            lr: 0.05,
            absolute: true,
        };
        let est = empirical_rademacher(&inst.problem, &net, &set, 3, &cfg, 9).unwrap();
        assert_eq!(est.per_draw.len(), 3);
        assert!((est.r_hat - stats::mean(&est.per_draw)).abs() < 1e-15);
        let again = empirical_rademacher(&inst.problem, &net, &set, 3, &cfg, 9).unwrap();
        assert_eq!(est, again);
        for w in &est.witnesses {
            assert_eq!(w.params.len(), NetworkPolicy::init(&inst.problem, &net).unwrap().total_params());
        }
    }

    #[test]
    fn bound_formulas() {
        let b = complexity_bounds(0.0, 1.0, 10_000, 0.05).unwrap();
        let expect = 2.0 * (40f64.ln() / 2e4).sqrt();
        assert!((b.c_nu - expect).abs() < 1e-15);
        assert!((b.c_nu - 0.027162030314812).abs() < 1e-12);
        assert!((b.c_e - 6.0 * (40f64.ln() / 1e4).sqrt()).abs() < 1e-15);

        let near_one = complexity_bounds(0.0, 2.0, 50, 1.0 - 1e-12).unwrap();
        assert!((near_one.c_nu - 2.0 * 2.0 * (2f64.ln() / 100.0).sqrt()).abs() < 1e-10);
        assert!((near_one.c_e - 6.0 * 2.0 * (2f64.ln() / 50.0).sqrt()).abs() < 1e-10);

        let r = 0.013;
        let b1 = complexity_bounds(r, 3.0, 400, 0.1).unwrap();
        let b2 = complexity_bounds(r, 3.0, 800, 0.1).unwrap();
        assert!(((b2.c_nu - 2.0 * r) - (b1.c_nu - 2.0 * r) / 2f64.sqrt()).abs() < 1e-15);
        assert!(((b2.c_e - 2.0 * r) - (b1.c_e - 2.0 * r) / 2f64.sqrt()).abs() < 1e-15);

        assert!(complexity_bounds(0.0, 1.0, 10, 0.0).is_err());
        assert!(complexity_bounds(0.0, 1.0, 10, 1.0).is_err());
        assert!(complexity_bounds(0.0, 0.0, 10, 0.5).is_err());
        assert!(complexity_bounds(0.0, 1.0, 0, 0.5).is_err());
    }

    #[test]
    fn self_comparison_has_zero_gap() {
        let params = MertonParams::default_with_dim(3);
        let inst = merton_problem(&params, 20.0).unwrap();
        let a = sample_training_set(inst.sampler.as_ref(), 500, 1).unwrap();
        let b = sample_training_set(inst.sampler.as_ref(), 500, 2).unwrap();
        let oracle = inst.oracle.unwrap();
        let rep = relative_performance(&inst.problem, &oracle, &oracle, &a, &b, 1.0).unwrap();
        assert_eq!(rep.p_in, 0.0);
        assert_eq!(rep.p_out, 0.0);
        assert_eq!(rep.gap, 0.0);
        assert_eq!(rep.o_hat, (rep.loss_true_in - rep.loss_true_out).abs());
        assert!(!rep.infinite_ce);
        let json = serde_json::to_string(&rep).unwrap();
        let back: GapReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn better_in_sample_action_has_positive_p_in() {
        let params = MertonParams::default_with_dim(1);
        let inst = merton_problem(&params, 20.0).unwrap();
        let a = sample_training_set(inst.sampler.as_ref(), 50, 1).unwrap();
        let b = sample_training_set(inst.sampler.as_ref(), 50, 2).unwrap();
        let mut alphas = Vec::new();
        for z in a.iter() {
            alphas.push((z.point(1)[0], if z.point(2)[0] > 0.0 { 20.0 } else { -20.0 }));
        }
        // A lookup that knows each training path's best corner.
        let f = std::sync::Arc::new(move |t: usize, _x: &[f64], z: &[f64], out: &mut [f64]| {
            out[0] = if t == 0 {
                1.0
            } else {
                alphas
                    .iter()
                    .find(|(z1, _)| *z1 == z[0])
                    .map_or(0.0, |(_, a)| *a)
            };
        });
        let cheat = FeedbackAction::ClosedForm(crate::control::ClosedForm::Custom {
            tag: "lookup".into(),
            f,
        });
        let oracle = inst.oracle.unwrap();
        let rep = relative_performance(&inst.problem, &cheat, &oracle, &a, &b, 1.0).unwrap();
        assert!(rep.p_in > 100.0, "{rep:?}");
        assert!((rep.gap - (rep.p_in - rep.p_out)).abs() == 0.0);
    }
}
