//! Deep Monte Carlo optimization for discrete-time stochastic control.
//!
//! Feedback actions are trained by minimizing the empirical average of
//! pathwise costs over a finite set of simulated disturbance trajectories.
//! Alongside the training loop the crate ships the tools needed to measure
//! how far a trained action overlearns its training set: the pathwise
//! optimum, partition bounds, empirical Rademacher complexity estimates and
//! in/out-of-sample performance gaps.
//!
//! Module map:
//!
//! * [`control`]: problems, trajectories, feedback actions, simulation and
//!   cost evaluation.
//! * [`nn`]: the multilayer perceptron, its gradients and the Adam optimizer.
//! * [`trainer`]: minibatch training through the dynamics with early stopping.
//! * [`problems`]: the two-period Merton problem and two-stage production
//!   planning, with samplers and closed-form solutions.
//! * [`diagnostics`]: overlearning measurements.
//! * [`harness`]: experiment sweeps, checkpoints and result files.

// `!(a <= b)` style checks are used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod control;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod nn;
pub mod problems;
pub mod rng;
pub mod stats;
pub mod trainer;

pub use control::{
    empirical_loss, mc_performance, pathwise_cost, simulate_state, ClosedForm, ControlBox,
    ControlProblem, FeedbackAction, Model, StatePath, Trajectory, TrainingSet,
};
pub use error::{Error, Result};
