//! SGD with momentum and weight decay, driven by a cosine learning-rate
//! schedule with warm restarts.
//!
//! Within a cycle of length `T_i` epochs the rate follows
//!
//! ```text
//! α = α_max / 2 · (1 + cos(π · T_cur / T_i))
//! ```
//!
//! where `T_cur` counts (fractional) epochs since the last restart and is
//! advanced after every batch. When `T_cur` reaches `T_i` the rate jumps back
//! to `α_max` and the next cycle is `T_mul` times longer.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::{self, FeatureMap, NetworkError, NetworkParams, ParamTensors};
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("invalid optimizer setting: {0}")]
    Config(String),
    #[error("gradient shapes do not match the parameters")]
    ShapeMismatch,
    #[error("training set is empty")]
    EmptyDataset,
    #[error(transparent)]
    Network(#[from] NetworkError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr_max: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr_max: 1e-3, momentum: 0.9, weight_decay: 5e-4, batch_size: 64 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.lr_max.is_finite() && self.lr_max > 0.0) {
            return Err(OptimError::Config(format!("lr_max must be > 0, got {}", self.lr_max)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(OptimError::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(OptimError::Config(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(OptimError::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrMode {
    #[default]
    Cycling,
    Constant,
    /// `α_max`, dropped ×0.1 every [`STEP_EVERY`] epochs.
    Step,
}

pub const STEP_EVERY: f64 = 30.0;
pub const STEP_FACTOR: f64 = 0.1;

// float drift from summing per-batch fractions must not postpone a restart
const RESTART_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleSchedule {
    /// `T_i`: current cycle length in epochs.
    pub cycle_len: f64,
    /// `T_mul`: growth factor applied at each restart.
    pub cycle_mul: f64,
    /// `T_cur`: epochs since the last restart.
    pub t_cur: f64,
    /// Total epochs advanced, used by [`LrMode::Step`].
    pub elapsed: f64,
    pub restarts: usize,
    pub mode: LrMode,
}

impl Default for CycleSchedule {
    fn default() -> Self {
        Self::new(LrMode::Cycling, 10.0, 2.0).expect("valid defaults")
    }
}

impl CycleSchedule {
    pub fn new(mode: LrMode, cycle_len: f64, cycle_mul: f64) -> Result<Self, OptimError> {
        if !(cycle_len.is_finite() && cycle_len > 0.0) {
            return Err(OptimError::Config(format!("cycle length must be > 0, got {cycle_len}")));
        }
        if !(cycle_mul.is_finite() && cycle_mul >= 1.0) {
            return Err(OptimError::Config(format!("cycle multiplier must be >= 1, got {cycle_mul}")));
        }
        Ok(Self { cycle_len, cycle_mul, t_cur: 0.0, elapsed: 0.0, restarts: 0, mode })
    }

    /// Moves the schedule forward by `fraction` epochs; returns whether a
    /// restart happened.
    pub fn advance(&mut self, fraction: f64) -> bool {
        debug_assert!(fraction > 0.0);
        self.t_cur += fraction;
        self.elapsed += fraction;
        if self.t_cur >= self.cycle_len - RESTART_EPS {
            self.t_cur = 0.0;
            self.cycle_len *= self.cycle_mul;
            self.restarts += 1;
            true
        } else {
            false
        }
    }
}

/// Learning rate for the current position of the schedule.
pub fn lr_at(sched: &CycleSchedule, cfg: &SgdConfig) -> f64 {
    match sched.mode {
        LrMode::Cycling => 0.5 * cfg.lr_max * (1.0 + (PI * sched.t_cur / sched.cycle_len).cos()),
        LrMode::Constant => cfg.lr_max,
        LrMode::Step => {
            let drops = ((sched.elapsed + RESTART_EPS) / STEP_EVERY).floor();
            cfg.lr_max * STEP_FACTOR.powf(drops)
        }
    }
}

/// Parameters, momentum buffers, epoch counter, and schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: NetworkParams,
    pub velocity: ParamTensors,
    pub epoch: usize,
    pub schedule: CycleSchedule,
}

impl TrainState {
    pub fn new(params: NetworkParams, schedule: CycleSchedule) -> Self {
        let velocity = ParamTensors::zeros_like(&params);
        Self { params, velocity, epoch: 0, schedule }
    }
}

/// `v ← μ·v + g + λ·θ;  θ ← θ − lr·v` on every learnable buffer.
pub fn sgd_step(state: &mut TrainState, grads: &ParamTensors, lr: f64, cfg: &SgdConfig) -> Result<(), OptimError> {
    if !grads.matches(&state.params) || !state.velocity.matches(&state.params) {
        return Err(OptimError::ShapeMismatch);
    }
    let params = state.params.learnable_mut();
    let velocity = state.velocity.buffers_mut();
    for ((p, v), g) in params.into_iter().zip(velocity).zip(grads.buffers()) {
        for ((pi, vi), gi) in p.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *pi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Labeled training samples plus the classes the softmax runs over.
#[derive(Debug, Clone)]
pub struct TrainingSet<'a> {
    pub inputs: Vec<&'a FeatureMap>,
    pub labels: Vec<usize>,
    pub classes: Vec<usize>,
}

impl TrainingSet<'_> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// One line of the per-epoch metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Learning rate at the epoch's first batch.
    pub lr: f64,
    pub loss: f64,
    pub seen_acc: f64,
}

/// One pass over `data` in a shuffled order derived from `(master_seed, epoch)`.
pub fn train_epoch(
    data: &TrainingSet<'_>,
    state: &mut TrainState,
    cfg: &SgdConfig,
    master_seed: u64,
) -> Result<EpochMetrics, OptimError> {
    if data.is_empty() {
        return Err(OptimError::EmptyDataset);
    }
    cfg.validate()?;
    let n = data.len();
    let epoch = state.epoch as u64;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed::derive(master_seed, seed::STREAM_SHUFFLE), epoch)));
    let mut dropout_rng = seed::rng(seed::derive(seed::derive(master_seed, seed::STREAM_DROPOUT), epoch));

    let mut first_lr = None;
    let (mut total_loss, mut correct) = (0.0, 0usize);
    for batch in order.chunks(cfg.batch_size) {
        let lr = lr_at(&state.schedule, cfg);
        first_lr.get_or_insert(lr);
        let mut grads = ParamTensors::zeros_like(&state.params);
        let scale = 1.0 / batch.len() as f64;
        for &i in batch {
            let label = data.labels[i];
            let out = network::forward(data.inputs[i], &state.params, true, &mut dropout_rng)?;
            total_loss += network::loss(&out, label, &data.classes)?;
            if network::predict(&out.scores_avg, &data.classes)? == label {
                correct += 1;
            }
            grads.add_scaled(&network::backward(&out, label, &data.classes, &state.params)?, scale);
        }
        sgd_step(state, &grads, lr, cfg)?;
        state.schedule.advance(batch.len() as f64 / n as f64);
    }
    let metrics = EpochMetrics {
        epoch: state.epoch,
        lr: first_lr.expect("at least one batch"),
        loss: total_loss / n as f64,
        seen_acc: correct as f64 / n as f64,
    };
    state.epoch += 1;
    Ok(metrics)
}
