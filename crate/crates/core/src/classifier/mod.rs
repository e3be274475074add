//! Dense classifiers trained with binary cross-entropy: the high-dropout MLP
//! over tweet embeddings, and the linear head used for end-to-end
//! fine-tuning of the encoder.

mod head;
mod mlp;

use std::fmt;

pub use head::{builtin_classify, encoder_gradient_check, fine_tune, finetune_loss_and_grad, FineTuneHyper, HeadParams, Joint};
pub use mlp::{default_width, dropout_mask, gradient_check, train_mlp, DropoutMode, MlpParams};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Decoupled decay; 0 trains with plain Adam.
    pub weight_decay: f64,
}

impl TrainHyper {
    /// MLP settings: batch 16384, lr 5e-5, 15 epochs, plain Adam.
    pub fn mlp_defaults() -> Self {
        TrainHyper {
            lr: 5e-5,
            batch: 16384,
            epochs: 15,
            seed: 0,
            weight_decay: 0.0,
        }
    }

    /// Fine-tuning settings: AdamW, lr 1e-5, batch 128, 2 epochs.
    pub fn finetune_defaults() -> Self {
        TrainHyper {
            lr: 1e-5,
            batch: 128,
            epochs: 2,
            seed: 0,
            weight_decay: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 || self.batch == 0 || self.epochs == 0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::invalid(format!("invalid training hyperparameters: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
}

impl fmt::Display for EpochLog {
    /// `epoch<TAB>loss<TAB>train_acc<TAB>val_acc`, `-` when there is no validation set.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{:.6}\t{:.6}\t", self.epoch, self.loss, self.train_acc)?;
        match self.val_acc {
            Some(v) => write!(f, "{v:.6}"),
            None => f.write_str("-"),
        }
    }
}

pub fn format_log(log: &[EpochLog]) -> String {
    log.iter().map(|e| format!("{e}\n")).collect()
}

pub(crate) fn check_labels(labels: &[u8]) -> Result<()> {
    match labels.iter().position(|&l| l > 1) {
        Some(i) => Err(Error::invalid(format!("label {} at row {i} is not binary", labels[i]))),
        None => Ok(()),
    }
}
