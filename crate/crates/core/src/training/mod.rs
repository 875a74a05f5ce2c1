//! Adversarial training loop and evaluation reports.

mod eval;
mod trainer;

pub use eval::{evaluate, format_report_table, write_report_jsonl, KindReport};
pub use trainer::{
    discriminator_batch_step, generator_batch_step, restore_planar, train, train_with,
    PlanarPair, TrainOutcome, Trainer,
};

use serde::{Deserialize, Serialize};

use crate::error::{CrtError, Result};

/// Optimization schedule. Profiles carry the published per-benchmark rows;
/// `desk` is sized for CPU runs on small datasets.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub seed: u64,
    /// Write `last.ckpt` every this many epochs (and always at the end).
    pub checkpoint_every_epochs: usize,
    /// Discriminator phases per micro-batch (1 keeps the 1:1 alternation).
    pub d_steps_per_g_step: usize,
    /// Use the minimax generator term `log(1 - D(x̂))` instead of the
    /// default non-saturating `-log D(x̂)`.
    pub minimax_adversarial: bool,
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 12,
            learning_rate: 1e-3,
            batch_size: 4,
            accumulation_steps: 1,
            seed: 0,
            checkpoint_every_epochs: 1,
            d_steps_per_g_step: 1,
            minimax_adversarial: false,
        }
    }

    pub fn libero() -> Self {
        TrainConfig {
            epochs: 30,
            learning_rate: 1e-4,
            batch_size: 12,
            accumulation_steps: 12,
            ..TrainConfig::desk()
        }
    }

    pub fn metaworld() -> Self {
        TrainConfig {
            epochs: 37,
            learning_rate: 7e-4,
            batch_size: 8,
            accumulation_steps: 32,
            ..TrainConfig::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.accumulation_steps == 0 {
            return Err(CrtError::Usage(
                "epochs, batch size, and accumulation steps must all be >= 1".into(),
            ));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(CrtError::Usage(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.checkpoint_every_epochs == 0 {
            return Err(CrtError::Usage("checkpoint cadence must be >= 1".into()));
        }
        if self.d_steps_per_g_step == 0 {
            return Err(CrtError::Usage("d steps per g step must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-micro-batch loss record; every value is finite by construction (a
/// non-finite loss aborts the run instead of being recorded).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub l1: f64,
    pub ssim_loss: f64,
    pub adv_g: f64,
    pub d_loss: f64,
}

/// Per-epoch validation metrics (restored vs clean).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub val_psnr: f64,
    pub val_ssim: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last_step(&self) -> Option<&StepRecord> {
        self.steps.last()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_carry_published_schedules() {
        let l = TrainConfig::libero();
        assert_eq!((l.epochs, l.batch_size, l.accumulation_steps), (30, 12, 12));
        assert_eq!(l.learning_rate, 1e-4);
        let m = TrainConfig::metaworld();
        assert_eq!((m.epochs, m.batch_size, m.accumulation_steps), (37, 8, 32));
        assert_eq!(m.learning_rate, 7e-4);
    }

    #[test]
    fn validation_rejects_degenerate_configs() {
        let mut c = TrainConfig::desk();
        c.epochs = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::desk();
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
    }
}
