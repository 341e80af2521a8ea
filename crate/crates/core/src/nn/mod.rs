//! LSTM sequence network with a Gaussian output head.
//!
//! The topology is fixed: a stack of LSTM layers, optional `tanh` dense
//! layers, and a 2-unit linear head emitting a raw mean and a raw scale per
//! time step. The predicted variance is `softplus(raw_scale) + 1e-6`.
//! Gradients are exact (backpropagation through time), all arithmetic is
//! `f64` and every reduction has a fixed order, so a seed fully determines a
//! training run.

mod adam;
mod arch;
mod gradcheck;
mod model;
mod train;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use arch::{init_params, Architecture, LayerKind, LayerShape, PnnParams};
pub use gradcheck::{finite_diff_check, max_relative_error, MAX_CHECKED_PARAMS};
pub use model::{
    batch_loss, forward, gaussian_nll, grad, Evaluator, GaussianSeqPrediction, Gradients,
    VARIANCE_FLOOR,
};
pub use train::{train_pnn, EarlyStopMonitor, StopReason, TrainConfig, TrainHistory};

/// One input sequence, row-major `[T × n_features]`, with `T` targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sequence<'a> {
    pub inputs: &'a [f64],
    pub targets: &'a [f64],
    pub n_features: usize,
}

impl Sequence<'_> {
    pub fn steps(&self) -> usize {
        self.targets.len()
    }
}

/// Indexed collection of training sequences.
pub trait SequenceSet {
    fn len(&self) -> usize;

    fn sequence(&self, index: usize) -> Sequence<'_>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SequenceSet for [Sequence<'_>] {
    fn len(&self) -> usize {
        <[Sequence<'_>]>::len(self)
    }

    fn sequence(&self, index: usize) -> Sequence<'_> {
        self[index]
    }
}
