use crate::dataset::{stack_images, Example};
use crate::ingredient_decoder::{IngredientBatch, IngredientModel, IngredientPrediction, LossOptions, SampleOptions};
use crate::instruction_decoder::{batch_nll, mean_nll, RecipeModel};
use crate::nn::IMAGE_ENCODER;
use crate::tensor::{Graph, Params, Scalar, Var};
use crate::Error;

use super::{fit, AdamState, EpochReport, FitOutcome, Objective, TrainConfig};

/// Evaluation batch size; results do not depend on it.
pub(crate) const EVAL_BATCH: usize = 64;

/// Stage-1 objective: an ingredient model's own loss.
pub struct IngredientObjective<'a> {
    pub model: &'a IngredientModel,
    pub train: &'a [Example],
    pub val: &'a [Example],
    pub loss: LossOptions,
}

impl<'a> IngredientObjective<'a> {
    fn batch<F: Scalar>(&self, examples: &[Example], idx: &[usize]) -> Result<IngredientBatch<F>, Error> {
        Ok(IngredientBatch {
            images: stack_images(examples, idx)?,
            lists: idx.iter().map(|&i| examples[i].ingredients.clone()).collect(),
        })
    }

    /// Mean loss over `examples` in inference mode.
    pub fn mean_loss<F: Scalar>(&self, p: &Params<F>, examples: &[Example]) -> Result<f64, Error> {
        if examples.is_empty() {
            return Err(Error::Validation("no examples to evaluate".into()));
        }
        let idx: Vec<usize> = (0..examples.len()).collect();
        let mut total = 0.0;
        for chunk in idx.chunks(EVAL_BATCH) {
            let mut g = Graph::new();
            let batch = self.batch::<F>(examples, chunk)?;
            let l = self.model.loss(&mut g, p, &batch, &self.loss)?;
            total += g.value(l).item().to_f64_lossy() * chunk.len() as f64;
        }
        Ok(total / examples.len() as f64)
    }
}

impl<F: Scalar> Objective<F> for IngredientObjective<'_> {
    fn n_train(&self) -> usize {
        self.train.len()
    }

    fn loss(&self, g: &mut Graph<F>, p: &Params<F>, batch: &[usize]) -> Result<Var, Error> {
        let b = self.batch(self.train, batch)?;
        self.model.loss(g, p, &b, &self.loss)
    }

    fn validation_loss(&self, p: &Params<F>) -> Result<f64, Error> {
        self.mean_loss(p, self.val)
    }
}

/// Loss options of a training configuration.
pub fn loss_options(cfg: &TrainConfig) -> LossOptions {
    LossOptions {
        label_smoothing: cfg.label_smoothing,
        set_weights: cfg.set_loss_weights,
    }
}

/// Stage 1: trains the image encoder and an ingredient predictor from
/// `init`, keeping the parameters with the best validation loss.
pub fn train_ingredients<F: Scalar>(
    model: &IngredientModel,
    init: Params<F>,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    progress: impl FnMut(&EpochReport),
) -> Result<FitOutcome<F>, Error> {
    let objective = IngredientObjective {
        model,
        train,
        val,
        loss: loss_options(cfg),
    };
    fit(&objective, init, AdamState::new(), cfg, 0, &[], progress)
}

/// Predicted ingredients for every example, in order.
pub fn predict_ingredients<F: Scalar>(
    model: &IngredientModel,
    p: &Params<F>,
    examples: &[Example],
    opts: &SampleOptions,
) -> Result<Vec<IngredientPrediction>, Error> {
    let idx: Vec<usize> = (0..examples.len()).collect();
    let mut out = Vec::with_capacity(examples.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let images = stack_images::<F>(examples, chunk)?;
        out.extend(model.predict(p, &images, opts)?);
    }
    Ok(out)
}

/// Stage-2 objective: teacher-forced instruction NLL with ground-truth
/// ingredients.
pub struct RecipeObjective<'a> {
    pub model: &'a RecipeModel,
    pub train: &'a [Example],
    pub val: &'a [Example],
}

impl<F: Scalar> Objective<F> for RecipeObjective<'_> {
    fn n_train(&self) -> usize {
        self.train.len()
    }

    fn loss(&self, g: &mut Graph<F>, p: &Params<F>, batch: &[usize]) -> Result<Var, Error> {
        Ok(batch_nll(self.model, g, p, self.train, batch)?.0)
    }

    fn validation_loss(&self, p: &Params<F>) -> Result<f64, Error> {
        mean_nll(self.model, p, self.val)
    }
}

/// Copies the image encoder of a stage-1 model into freshly initialized
/// stage-2 parameters. Missing or differently shaped tensors are a
/// configuration error.
pub fn adopt_image_encoder<F: Scalar>(init: &mut Params<F>, stage1: &Params<F>) -> Result<(), Error> {
    let names: Vec<String> = init.names().filter(|n| n.starts_with(IMAGE_ENCODER)).cloned().collect();
    for name in names {
        let src = stage1
            .get(&name)
            .ok_or_else(|| Error::Config(format!("stage-1 parameters lack `{name}`")))?;
        let dst = init.get_mut(&name).expect("listed name");
        if src.shape() != dst.shape() {
            return Err(Error::Config(format!(
                "`{name}` is {:?} in the stage-1 model but {:?} here",
                src.shape(),
                dst.shape()
            )));
        }
        *dst = src.clone();
    }
    Ok(())
}

/// Stage 2: trains the ingredient embedding and instruction decoder on top
/// of the stage-1 image encoder, which stays frozen.
pub fn train_recipe<F: Scalar>(
    model: &RecipeModel,
    mut init: Params<F>,
    stage1: &Params<F>,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    progress: impl FnMut(&EpochReport),
) -> Result<FitOutcome<F>, Error> {
    adopt_image_encoder(&mut init, stage1)?;
    let objective = RecipeObjective { model, train, val };
    fit(&objective, init, AdamState::new(), cfg, 0, &[IMAGE_ENCODER], progress)
}
