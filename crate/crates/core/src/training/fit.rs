use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adam_step, AdamState, TrainConfig};
use crate::tensor::{Graph, Params, Scalar, Var};
use crate::Error;

/// A trainable objective over indexed training examples.
pub trait Objective<F: Scalar> {
    fn n_train(&self) -> usize;

    /// Loss of the training examples `batch` in a train-mode graph.
    fn loss(&self, g: &mut Graph<F>, p: &Params<F>, batch: &[usize]) -> Result<Var, Error>;

    /// Validation loss, lower is better.
    fn validation_loss(&self, p: &Params<F>) -> Result<f64, Error>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct FitOutcome<F> {
    /// Parameters of the epoch with the lowest validation loss.
    pub best: Params<F>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Parameters and optimizer state after the last epoch.
    pub last: Params<F>,
    pub optimizer: AdamState<F>,
    pub history: Vec<EpochReport>,
}

/// Whether training stops after `history` (validation losses, oldest
/// first): true once the last `max(patience, 1)` epochs failed to improve
/// strictly on the best loss seen before them.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for &v in history {
        if v < best {
            best = v;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    stale >= patience.max(1)
}

/// Mini-batch Adam over `objective` with per-epoch shuffling, learning-rate
/// decay, validation after each epoch and early stopping. Parameters under
/// any of `frozen` prefixes never change. `progress` sees every epoch.
pub fn fit<F: Scalar>(
    objective: &dyn Objective<F>,
    mut params: Params<F>,
    mut optimizer: AdamState<F>,
    cfg: &TrainConfig,
    start_epoch: usize,
    frozen: &[&str],
    mut progress: impl FnMut(&EpochReport),
) -> Result<FitOutcome<F>, Error> {
    cfg.validate()?;
    let n = objective.n_train();
    if n == 0 {
        return Err(Error::Validation("no training examples".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::new();
    let mut val_history = Vec::new();
    let mut best = (params.clone(), start_epoch, f64::INFINITY);
    for epoch in start_epoch..start_epoch + cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 0));
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = Graph::training(mix(cfg.seed, epoch as u64, bi as u64 + 1));
            for prefix in frozen {
                g.freeze_prefix(prefix);
            }
            let loss = objective.loss(&mut g, &params, batch)?;
            let value = g.value(loss).item().to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::Diverged(format!("loss {value} at epoch {epoch}, batch {bi}")));
            }
            total += value * batch.len() as f64;
            let grads = g.backward(loss)?.params(&g);
            adam_step(&mut params, &grads, &mut optimizer, &cfg.adam, |name| cfg.lr_for(name, epoch))?;
        }
        let val_loss = objective.validation_loss(&params)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!("validation loss {val_loss} at epoch {epoch}")));
        }
        let report = EpochReport {
            epoch,
            train_loss: total / n as f64,
            val_loss,
            lr: cfg.lr_at(epoch),
        };
        progress(&report);
        history.push(report);
        if val_loss < best.2 {
            best = (params.clone(), epoch, val_loss);
        }
        val_history.push(val_loss);
        if early_stop(&val_history, cfg.patience) {
            break;
        }
    }
    Ok(FitOutcome {
        best: best.0,
        best_epoch: best.1,
        best_val_loss: best.2,
        last: params,
        optimizer,
        history,
    })
}

/// Derives a stream seed from a base seed and two counters.
pub(crate) fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 29)
}
