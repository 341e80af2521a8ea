use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, OptimizerState};
use super::arch::{init_params, Architecture, PnnParams};
use super::model::{batch_gradient, Evaluator, Gradients};
use super::SequenceSet;
use crate::{Error, Result};

/// Quantity watched by early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EarlyStopMonitor {
    /// Mean training loss of each epoch.
    TrainLoss,
    /// Always run `max_epochs`.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    pub early_stop_monitor: EarlyStopMonitor,
    /// First (1-based) epoch whose loss counts towards patience.
    pub early_stop_start: usize,
    pub patience: usize,
    /// Global-norm gradient clipping threshold; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            batch_size: 32,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            max_epochs: 100,
            early_stop_monitor: EarlyStopMonitor::TrainLoss,
            early_stop_start: 35,
            patience: 3,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidArgument(
                "batch_size and max_epochs must be at least 1".to_string(),
            ));
        }
        if !(self.learning_rate > 0.0)
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.epsilon > 0.0)
        {
            return Err(Error::InvalidArgument(format!(
                "invalid Adam hyperparameters {:?}",
                self.adam()
            )));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::InvalidArgument("clip_norm must be >= 0".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean training NLL of every epoch run.
    pub epoch_losses: Vec<f64>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stop_epoch: usize,
    pub stop_reason: StopReason,
    /// Optimizer steps whose gradient was rescaled by clipping.
    pub clipped_steps: u64,
}

impl TrainHistory {
    pub fn best_loss(&self) -> f64 {
        self.epoch_losses[self.best_epoch - 1]
    }
}

/// Trains one member with mini-batch Adam.
///
/// Windows are reshuffled every epoch from a stream derived from `seed`
/// (separate from the initialization stream); the last partial batch is
/// kept. Early stopping ends training once `patience` consecutive epochs at
/// or after `early_stop_start` fail to improve the best loss so far. The
/// parameters of the best epoch are returned.
pub fn train_pnn<S: SequenceSet + ?Sized>(
    architecture: &Architecture,
    windows: &S,
    config: &TrainConfig,
    seed: u64,
) -> Result<(PnnParams, TrainHistory)> {
    config.validate()?;
    if windows.is_empty() {
        return Err(Error::InvalidArgument("no training windows".to_string()));
    }
    let n_features = windows.sequence(0).n_features;
    if n_features != architecture.input_dim {
        return Err(Error::FeatureMismatch(format!(
            "windows have {n_features} features, architecture expects {}",
            architecture.input_dim
        )));
    }

    let mut params = init_params(architecture, seed)?;
    let mut state = OptimizerState::new(config.adam(), params.len());
    let mut eval = Evaluator::new(architecture);
    let mut grads = Gradients::zeros(params.len());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seed);
    shuffle_rng.set_stream(1);
    let mut order: Vec<usize> = (0..windows.len()).collect();

    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut losses = Vec::new();
    let mut clipped_steps = 0u64;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        let mut clipped_this_epoch = 0u64;
        for batch in order.chunks(config.batch_size) {
            grads.0.fill(0.0);
            let loss = batch_gradient(&mut eval, &params, windows, batch, &mut grads).map_err(|e| {
                match e {
                    Error::NonFiniteLoss { .. } | Error::NonFinite(_) => Error::Diverged { epoch },
                    other => other,
                }
            })?;
            total += loss * batch.len() as f64;
            if config.clip_norm > 0.0 {
                let norm = grads.global_norm();
                if !norm.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                if norm > config.clip_norm {
                    grads.scale(config.clip_norm / norm);
                    clipped_this_epoch += 1;
                }
            }
            adam_step(&mut params, &grads, &mut state)?;
        }
        let epoch_loss = total / windows.len() as f64;
        if !epoch_loss.is_finite() || params.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { epoch });
        }
        losses.push(epoch_loss);
        clipped_steps += clipped_this_epoch;
        if clipped_this_epoch > 0 {
            log::debug!("epoch {epoch}: gradient clipped on {clipped_this_epoch} steps");
        }
        log::debug!("epoch {epoch}: loss {epoch_loss:.6}");

        if epoch_loss < best_loss {
            best_loss = epoch_loss;
            best_epoch = epoch;
            best.values.copy_from_slice(&params.values);
            stale = 0;
        } else if config.early_stop_monitor == EarlyStopMonitor::TrainLoss
            && epoch >= config.early_stop_start
        {
            stale += 1;
            if stale >= config.patience {
                stop_reason = StopReason::EarlyStop;
                break;
            }
        }
    }

    let history = TrainHistory {
        stop_epoch: losses.len(),
        epoch_losses: losses,
        best_epoch,
        stop_reason,
        clipped_steps,
    };
    Ok((best, history))
}
