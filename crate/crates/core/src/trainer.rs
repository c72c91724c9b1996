//! Minibatch training of network actions by differentiating the pathwise
//! cost through the dynamics.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::control::{check_set, empirical_loss, ControlProblem, FeedbackAction, Rollout, TrainingSet};
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamConfig, AdamState, NetConfig, NetworkPolicy};
use crate::rng;
use crate::stats;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StopRule {
    /// Stop once the validation loss exceeds its running minimum by more
    /// than `tolerance` for `patience` consecutive epochs.
    Conservative { tolerance: f64, patience: usize },
    /// Run exactly `count` epochs.
    FixedEpochs { count: usize },
}

impl StopRule {
    pub fn conservative() -> Self {
        StopRule::Conservative {
            tolerance: 1e-6,
            patience: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Epoch cap for the conservative rule.
    pub max_epochs: usize,
    pub stop_rule: StopRule,
    pub shuffle_seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 200,
            stop_rule: StopRule::conservative(),
            shuffle_seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if let StopRule::Conservative { tolerance, patience } = self.stop_rule {
            if !(tolerance >= 0.0) {
                return Err(Error::config("stopping tolerance must be non-negative"));
            }
            if patience == 0 {
                return Err(Error::config("patience must be at least 1"));
            }
        }
        Ok(())
    }

    fn epoch_cap(&self) -> usize {
        match self.stop_rule {
            StopRule::Conservative { .. } => self.max_epochs,
            StopRule::FixedEpochs { count } => count,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ValidationWorsened,
    MaxEpochs,
    NumericError,
}

/// Learning curves and stopping information of one run. Epochs are counted
/// from 1; epoch 0 denotes the initial parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    pub stop_epoch: usize,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
    pub error: Option<String>,
    pub wall_time_secs: f64,
}

impl PartialEq for TrainReport {
    /// Wall time is not part of the comparison.
    fn eq(&self, other: &Self) -> bool {
        self.train_loss == other.train_loss
            && self.validation_loss == other.validation_loss
            && self.stop_epoch == other.stop_epoch
            && self.stop_reason == other.stop_reason
            && self.best_epoch == other.best_epoch
            && self.error == other.error
    }
}

impl TrainReport {
    pub fn best_validation_loss(&self) -> Option<f64> {
        self.best_epoch
            .checked_sub(1)
            .and_then(|i| self.validation_loss.get(i).copied())
    }
}

/// Permutation of `0..n` used in epoch `epoch`.
pub fn epoch_permutation(n: usize, shuffle_seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng::seeded(rng::derive_seed(&[shuffle_seed, epoch as u64]));
    idx.shuffle(&mut r);
    idx
}

/// Gradient buffers matching the networks of a policy.
pub fn zero_grads(policy: &NetworkPolicy) -> Vec<Vec<f64>> {
    policy.nets.iter().map(|n| vec![0.0; n.len()]).collect()
}

/// Accumulates the gradient of `sum_k weights[k] * cost(indices[k])` into
/// `grads` and returns that weighted sum. With `weights = None` every sample
/// gets weight `1 / indices.len()`, i.e. the batch mean.
pub(crate) fn weighted_gradient(
    problem: &ControlProblem,
    policy: &NetworkPolicy,
    set: &TrainingSet,
    indices: &[usize],
    weights: Option<&[f64]>,
    grads: &mut [Vec<f64>],
    ws: &mut Rollout,
) -> Result<f64> {
    let uniform = 1.0 / indices.len() as f64;
    let mut total = 0.0;
    for (k, &i) in indices.iter().enumerate() {
        let w = weights.map_or(uniform, |w| w[k]);
        let z = set.path(i);
        let cost = ws.forward_policy(problem, policy, z)?;
        total += w * cost;
        ws.backward_network(problem, policy, z, w, grads)?;
    }
    Ok(total)
}

/// Empirical loss of `policy` on `set` and its gradient with respect to the
/// parameters of every network.
pub fn loss_gradient(
    problem: &ControlProblem,
    policy: &NetworkPolicy,
    set: &TrainingSet,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_set(problem, set)?;
    FeedbackAction::Network(policy.clone()).check(problem)?;
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut grads = zero_grads(policy);
    let mut ws = Rollout::new(problem);
    let loss = weighted_gradient(problem, policy, set, &idx, None, &mut grads, &mut ws)?;
    Ok((loss, grads))
}

/// One pass over the training set in a seeded random order with one Adam
/// update per minibatch. Returns the size-weighted mean of batch losses.
#[allow(clippy::too_many_arguments)]
pub fn minibatch_epoch(
    problem: &ControlProblem,
    policy: &mut NetworkPolicy,
    set: &TrainingSet,
    batch_size: usize,
    shuffle_seed: u64,
    epoch: usize,
    adam: &mut [AdamState],
) -> Result<f64> {
    check_set(problem, set)?;
    if batch_size == 0 || batch_size > set.len() {
        return Err(Error::config(format!(
            "batch size {batch_size} must be in 1..={}",
            set.len()
        )));
    }
    if adam.len() != policy.nets.len() {
        return Err(Error::Dimension {
            what: "adam states",
            expected: policy.nets.len(),
            got: adam.len(),
        });
    }
    let perm = epoch_permutation(set.len(), shuffle_seed, epoch);
    let mut ws = Rollout::new(problem);
    let mut grads = zero_grads(policy);
    let mut weighted = Vec::with_capacity(perm.len().div_ceil(batch_size));
    for batch in perm.chunks(batch_size) {
        grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
        let loss = weighted_gradient(problem, policy, set, batch, None, &mut grads, &mut ws)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite batch loss {loss}")));
        }
        for ((net, g), st) in policy.nets.iter_mut().zip(&grads).zip(adam.iter_mut()) {
            adam_step(net.params_mut(), g, st)?;
        }
        weighted.push(loss * batch.len() as f64);
    }
    Ok(stats::compensated_sum(weighted) / set.len() as f64)
}

fn check_disjoint(train: &TrainingSet, validation: &TrainingSet) -> Result<()> {
    if train.sampler_id == validation.sampler_id && train.seed == validation.seed {
        return Err(Error::config(
            "training and validation sets come from the same sampler stream",
        ));
    }
    Ok(())
}

/// Trains freshly initialized networks. See [`train_policy`].
pub fn train(
    problem: &ControlProblem,
    train_set: &TrainingSet,
    validation_set: &TrainingSet,
    net_config: &NetConfig,
    config: &TrainConfig,
) -> Result<(FeedbackAction, TrainReport)> {
    let policy = NetworkPolicy::init(problem, net_config)?;
    let (policy, report) = train_policy(problem, policy, train_set, validation_set, config)?;
    Ok((FeedbackAction::Network(policy), report))
}

/// Runs epochs until the stop rule fires, evaluating the validation loss
/// after every epoch.
///
/// Under the conservative rule the parameters of the best validation epoch
/// are returned; fixed-epoch runs return the final parameters. A numeric
/// failure mid-run ends training and returns the best parameters seen so far.
pub fn train_policy(
    problem: &ControlProblem,
    policy: NetworkPolicy,
    train_set: &TrainingSet,
    validation_set: &TrainingSet,
    config: &TrainConfig,
) -> Result<(NetworkPolicy, TrainReport)> {
    config.validate()?;
    check_set(problem, train_set)?;
    check_set(problem, validation_set)?;
    check_disjoint(train_set, validation_set)?;
    let started = Instant::now();
    let mut adam: Vec<AdamState> = policy
        .nets
        .iter()
        .map(|n| AdamState::new(n.len(), config.adam))
        .collect();
    let mut report = TrainReport {
        train_loss: Vec::new(),
        validation_loss: Vec::new(),
        stop_epoch: 0,
        stop_reason: StopReason::MaxEpochs,
        best_epoch: 0,
        error: None,
        wall_time_secs: 0.0,
    };
    let mut best = policy.clone();
    let mut action = FeedbackAction::Network(policy);
    let mut running_min = f64::INFINITY;
    let mut strikes = 0usize;
    let fixed = matches!(config.stop_rule, StopRule::FixedEpochs { .. });

    for epoch in 1..=config.epoch_cap() {
        let FeedbackAction::Network(policy) = &mut action else {
            unreachable!()
        };
        let step = minibatch_epoch(
            problem,
            policy,
            train_set,
            config.batch_size,
            config.shuffle_seed,
            epoch,
            &mut adam,
        )
        .and_then(|train_loss| {
            let val = empirical_loss(problem, &action, validation_set)?;
            Ok((train_loss, val))
        });
        let (train_loss, val) = match step {
            Ok(v) => v,
            Err(e @ (Error::Numeric(_) | Error::NumericOverflow { .. })) => {
                log::warn!("training stopped at epoch {epoch}: {e}");
                report.stop_reason = StopReason::NumericError;
                report.error = Some(e.to_string());
                report.stop_epoch = epoch - 1;
                report.wall_time_secs = started.elapsed().as_secs_f64();
                return Ok((best, report));
            }
            Err(e) => return Err(e),
        };
        report.train_loss.push(train_loss);
        report.validation_loss.push(val);
        report.stop_epoch = epoch;
        log::debug!("epoch {epoch}: train {train_loss:.6e} validation {val:.6e}");

        let worsened = match config.stop_rule {
            StopRule::Conservative { tolerance, .. } => val > running_min + tolerance,
            StopRule::FixedEpochs { .. } => false,
        };
        if val < running_min {
            running_min = val;
            report.best_epoch = epoch;
            if !fixed {
                if let FeedbackAction::Network(p) = &action {
                    best = p.clone();
                }
            }
        }
        strikes = if worsened { strikes + 1 } else { 0 };
        if let StopRule::Conservative { patience, .. } = config.stop_rule {
            if strikes >= patience {
                report.stop_reason = StopReason::ValidationWorsened;
                break;
            }
        }
    }
    report.wall_time_secs = started.elapsed().as_secs_f64();
    let FeedbackAction::Network(last) = action else {
        unreachable!()
    };
    Ok((if fixed { last } else { best }, report))
}
