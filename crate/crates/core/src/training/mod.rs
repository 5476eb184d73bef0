//! Optimization: Adam, the learning-rate schedule, early stopping, the
//! two-stage training procedure and checkpoints.

mod adam;
mod checkpoint;
mod fit;
mod stages;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointMeta, ModelSpec, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use fit::{early_stop, fit, EpochReport, FitOutcome, Objective};
pub(crate) use fit::mix;
pub use stages::{
    adopt_image_encoder, loss_options, predict_ingredients, train_ingredients, train_recipe, IngredientObjective,
    RecipeObjective,
};

use serde::{Deserialize, Serialize};

use crate::ingredient_decoder::{IngredientModelKind, SetLossWeights};
use crate::nn::IMAGE_ENCODER;
use crate::Error;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Learning-rate multiplier for parameters under `image_encoder.`.
    pub encoder_lr_scale: f64,
    pub adam: AdamConfig,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub label_smoothing: f64,
    pub set_loss_weights: SetLossWeights,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale hyperparameters for an ingredient model.
    pub fn paper(kind: IngredientModelKind) -> Self {
        let (lr, scale, batch) = match kind {
            IngredientModelKind::TfSet => (1e-4, 1.0, 300),
            IngredientModelKind::TfList | IngredientModelKind::TfListShuffle => (1e-3, 0.1, 300),
            IngredientModelKind::FfTd => (1e-3, 0.1, 300),
            IngredientModelKind::FfDc => (1e-3, 0.01, 256),
            IngredientModelKind::FfBce | IngredientModelKind::FfIou => (1e-3, 0.01, 300),
        };
        TrainConfig {
            lr,
            encoder_lr_scale: scale,
            batch_size: batch,
            max_epochs: 400,
            patience: 50,
            ..Self::desk()
        }
    }

    /// Small-scale settings used by the examples and the synthetic runs.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 1e-3,
            encoder_lr_scale: 1.0,
            adam: AdamConfig::default(),
            lr_decay: 0.99,
            batch_size: 16,
            max_epochs: 200,
            patience: 10,
            label_smoothing: 0.1,
            set_loss_weights: SetLossWeights::default(),
            seed: 0,
        }
    }

    /// The desk preset with the learning rate suited to `kind`.
    pub fn desk_for(kind: IngredientModelKind) -> Self {
        let mut cfg = Self::desk();
        if kind == IngredientModelKind::TfSet {
            cfg.lr = 3e-3;
        }
        cfg
    }

    /// `lr * decay^epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }

    /// Learning rate of parameter `name` during `epoch`.
    pub fn lr_for(&self, name: &str, epoch: usize) -> f64 {
        let scale = if name.starts_with(IMAGE_ENCODER) {
            self.encoder_lr_scale
        } else {
            1.0
        };
        self.lr_at(epoch) * scale
    }

    pub fn validate(&self) -> Result<(), Error> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail("label_smoothing must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail("lr_decay must lie in (0, 1]");
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}
