use serde::{Deserialize, Serialize};

use super::{argmax, indicator_matrix, rank_by_score, IngredientModel, IngredientPrediction, IngredientSet, EMBED, EOS, OUT};
use crate::nn::{linear, Condition, Conditioning};
use crate::tensor::{sigmoid, Graph, Mask, Params, Scalar, Tensor, Var};
use crate::Error;

/// Weights of the three set-transformer loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SetLossWeights {
    pub ingredients: f64,
    pub eos: f64,
    pub cardinality: f64,
}

impl Default for SetLossWeights {
    fn default() -> Self {
        SetLossWeights {
            ingredients: 1000.0,
            eos: 1.0,
            cardinality: 1.0,
        }
    }
}

/// Result of decoding `T` steps on the model's own greedy selections.
pub struct TfSetOutput {
    /// `[B, T, N]` ingredient distributions; ids selected at earlier steps
    /// have probability exactly zero.
    pub probs: Var,
    /// `[B, T]` logits of the separate end-of-set unit.
    pub eos_logits: Var,
    /// Greedy selection of every step, per sample.
    pub selected: Vec<Vec<usize>>,
}

impl TfSetOutput {
    /// Pools each sample over its first `K` steps, `K` being the size of its
    /// ground-truth set.
    pub fn pool_first_k<F: Scalar>(&self, g: &mut Graph<F>, sets: &[IngredientSet]) -> Result<Var, Error> {
        let s = g.shape(self.probs).to_vec();
        let (b, t) = (s[0], s[1]);
        if sets.len() != b {
            return Err(Error::Validation(format!("{} targets for a batch of {b}", sets.len())));
        }
        let mut gate = Vec::with_capacity(b * t);
        for set in sets {
            if set.len() > t {
                return Err(Error::Validation(format!("{} ingredients exceed {t} decode steps", set.len())));
            }
            let k = set.len().max(1);
            gate.extend((0..t).map(|i| if i < k { F::one() } else { F::zero() }));
        }
        let gate = g.constant(Tensor::new(&[b, t, 1], gate)?);
        let gated = g.mul(self.probs, gate)?;
        pool_over_time(g, gated)
    }
}

/// Decodes `steps` positions from the start token, feeding back each step's
/// argmax and setting the logits of already selected ids to −∞.
pub fn tf_set_forward<F: Scalar>(
    g: &mut Graph<F>,
    p: &Params<F>,
    model: &IngredientModel,
    img: Var,
    steps: usize,
) -> Result<TfSetOutput, Error> {
    if steps < 1 {
        return Err(Error::Config("the set decoder needs at least one step".into()));
    }
    let n = model.config.n_ingredients;
    if steps > n {
        return Err(Error::Config(format!("{steps} masked steps exceed a dictionary of {n}")));
    }
    let b = g.shape(img)[0];
    let stack = model.stack();
    let cond = Conditioning {
        image: Some(Condition { rows: img, mask: None }),
        ingredients: None,
    };
    let mut state = stack.start(g, p, &cond)?;
    let mut prev = vec![n; b];
    let mut selected = vec![Vec::with_capacity(steps); b];
    let mut blocked = vec![false; b * n];
    let (mut probs, mut eos) = (Vec::with_capacity(steps), Vec::with_capacity(steps));
    for t in 0..steps {
        let x = stack.embed(g, p, EMBED, &prev, b, t)?;
        let h = stack.step(g, p, &mut state, x)?;
        let logits = linear(g, p, OUT, h)?;
        let logits = if t > 0 {
            g.masked_fill(logits, &Mask::new(&[b, 1, n], blocked.clone())?, F::neg_infinity())?
        } else {
            logits
        };
        let pr = g.softmax(logits, 2)?;
        let values = g.value(pr).to_f64_vec();
        for bi in 0..b {
            let id = argmax(&values[bi * n..(bi + 1) * n]);
            selected[bi].push(id);
            blocked[bi * n + id] = true;
            prev[bi] = id;
        }
        probs.push(pr);
        eos.push(linear(g, p, EOS, h)?);
    }
    let probs = g.concat(&probs, 1)?;
    let eos = g.concat(&eos, 1)?;
    let eos_logits = g.reshape(eos, &[b, steps])?;
    Ok(TfSetOutput {
        probs,
        eos_logits,
        selected,
    })
}

/// Elementwise maximum over the time axis of `[.., T, N]` step
/// distributions.
pub fn pool_over_time<F: Scalar>(g: &mut Graph<F>, step_probs: Var) -> Result<Var, Error> {
    let rank = g.shape(step_probs).len();
    if rank < 2 {
        return Err(Error::Validation("step probabilities need a time axis".into()));
    }
    Ok(g.max_over_axis(step_probs, rank - 2)?.0)
}

/// `w_i * BCE(pooled, s) + w_e * BCE(eos, step) + w_c * |sum(pooled) - K|`
/// over a batch: `pooled` is `[B, N]`, `eos_logits` is `[B, T]`. The eos
/// target of sample `b` is 0 for its first `K_b` steps and 1 afterwards.
/// Both BCE terms use `smoothing`; the cardinality term is averaged over
/// the batch.
pub fn tf_set_loss<F: Scalar>(
    g: &mut Graph<F>,
    pooled: Var,
    eos_logits: Var,
    sets: &[IngredientSet],
    smoothing: f64,
    w: SetLossWeights,
) -> Result<Var, Error> {
    let ps = g.shape(pooled).to_vec();
    let es = g.shape(eos_logits).to_vec();
    if ps.len() != 2 || es.len() != 2 || ps[0] != es[0] || ps[0] != sets.len() {
        return Err(Error::Validation(format!(
            "pooled {ps:?} and eos {es:?} do not fit {} targets",
            sets.len()
        )));
    }
    let (b, n, t) = (ps[0], ps[1], es[1]);
    let mut step = Vec::with_capacity(b * t);
    for s in sets {
        if s.len() > t {
            return Err(Error::Validation(format!("{} ingredients exceed {t} decode steps", s.len())));
        }
        step.extend((0..t).map(|i| if i < s.len() { F::zero() } else { F::one() }));
    }
    let target = indicator_matrix::<F>(sets, n)?;
    let l_ingr = g.bce(pooled, &target, smoothing)?;
    let l_eos = g.bce_with_logits(eos_logits, &Tensor::new(&[b, t], step)?, smoothing)?;

    let total = g.sum_axis(pooled, 1)?;
    let k = Tensor::new(&[b], sets.iter().map(|s| F::from_usize(s.len()).unwrap()).collect())?;
    let k = g.constant(k);
    let gap = g.sub(total, k)?;
    let gap = g.abs(gap);
    let l_card = g.mean(gap);

    let l_ingr = g.scale(l_ingr, F::from_f64_lossy(w.ingredients));
    let l_eos = g.scale(l_eos, F::from_f64_lossy(w.eos));
    let l_card = g.scale(l_card, F::from_f64_lossy(w.cardinality));
    let sum = g.add(l_ingr, l_eos)?;
    Ok(g.add(sum, l_card)?)
}

/// Greedy decoding that stops at the first step whose eos probability
/// exceeds the largest ingredient probability, or after `K_max` steps.
pub fn tf_set_sample<F: Scalar>(
    g: &mut Graph<F>,
    p: &Params<F>,
    model: &IngredientModel,
    img: Var,
) -> Result<Vec<IngredientPrediction>, Error> {
    let n = model.config.n_ingredients;
    let t = model.config.max_ingredients;
    let out = tf_set_forward(g, p, model, img, t)?;
    let probs = g.value(out.probs).to_f64_vec();
    let eos: Vec<f64> = g
        .value(out.eos_logits)
        .data()
        .iter()
        .map(|&z| sigmoid(z).to_f64_lossy())
        .collect();
    let pooled = pool_over_time(g, out.probs)?;
    let pooled = g.value(pooled).to_f64_vec();
    let mut preds = Vec::with_capacity(out.selected.len());
    for (bi, sel) in out.selected.iter().enumerate() {
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|i| probs[(bi * t + i) * n..(bi * t + i + 1) * n].to_vec())
            .collect();
        let stop = (0..t).find(|&i| {
            let best = rows[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            eos[bi * t + i] > best
        });
        let k = stop.unwrap_or(t);
        let scores = pooled[bi * n..(bi + 1) * n].to_vec();
        preds.push(IngredientPrediction {
            set: IngredientSet::new(sel[..k].iter().copied()),
            ranking: rank_by_score(&scores),
            scores,
            step_probs: Some(rows),
            eos_step: stop,
        });
    }
    Ok(preds)
}
