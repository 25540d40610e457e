//! Objectives and training loops for the classifier and the simulators.

mod classifier;
pub mod losses;
mod simulator;
pub mod stats;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Coupling, OutputMode};

pub use classifier::{accuracy, balanced_accuracy, logits_of, train_classifier, train_classifier_with, ClassifierRun, EpochRecord};
pub use losses::{bce_loss_variant, cycle_loss, logit_shift_loss};
pub use simulator::{train_simulator_pair, train_simulator_pair_with, LossBreakdown, SimulatorRun};
pub use stats::{logit_shift_stats, spearman, LogitShiftStats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossVariant {
    LogitShift,
    Bce,
}

/// Simulator training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Logit-shift threshold.
    pub delta: f64,
    /// Smoothness weight for warp fields.
    pub lambda_phi: f64,
    pub experts: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mode: OutputMode,
    pub loss_variant: LossVariant,
    pub coupling: Coupling,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            delta: 5.0,
            lambda_phi: 0.02,
            experts: 3,
            lr: 1e-4,
            epochs: 60,
            batch_size: 32,
            mode: OutputMode::DirectImage,
            loss_variant: LossVariant::LogitShift,
            coupling: Coupling::Condconv,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.delta > 0.0
            && self.lambda_phi >= 0.0
            && self.experts >= 1
            && self.lr > 0.0
            && self.batch_size >= 1
            && self.delta.is_finite()
            && self.lambda_phi.is_finite()
            && self.lr.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid training configuration {self:?}")))
        }
    }
}

/// Classifier training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            epochs: 30,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr > 0.0 && self.lr.is_finite() && self.batch_size >= 1 {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("invalid classifier configuration {self:?}")))
        }
    }
}
