use super::{argmax, indicator_matrix, rank_by_score, IngredientModel, IngredientModelKind, IngredientPrediction, IngredientSet, SampleOptions};
use super::{FF_CARD, FF_HIDDEN, FF_OUT};
use crate::nn::linear;
use crate::tensor::{sigmoid, Graph, Params, Scalar, Tensor, Var};
use crate::Error;

pub struct FfOutput {
    /// `[B, N]` ingredient logits.
    pub logits: Var,
    /// `[B, K_max + 1]` cardinality logits (`ff-dc` only).
    pub card_logits: Option<Var>,
}

/// Two-layer perceptron over image features averaged across positions.
pub fn ff_forward<F: Scalar>(g: &mut Graph<F>, p: &Params<F>, model: &IngredientModel, img: Var) -> Result<FfOutput, Error> {
    let pooled = g.mean_axis(img, 1)?;
    let h = linear(g, p, FF_HIDDEN, pooled)?;
    let h = g.relu(h);
    let h = g.dropout(h, model.config.dropout);
    let logits = linear(g, p, FF_OUT, h)?;
    let card_logits = if model.kind == IngredientModelKind::FfDc {
        Some(linear(g, p, FF_CARD, h)?)
    } else {
        None
    };
    Ok(FfOutput { logits, card_logits })
}

pub fn ff_bce_loss<F: Scalar>(g: &mut Graph<F>, logits: Var, sets: &[IngredientSet], smoothing: f64) -> Result<Var, Error> {
    let n = g.shape(logits)[1];
    let target = indicator_matrix::<F>(sets, n)?;
    Ok(g.bce_with_logits(logits, &target, smoothing)?)
}

/// Cross-entropy against the target distribution `s / K`.
pub fn ff_td_loss<F: Scalar>(g: &mut Graph<F>, logits: Var, sets: &[IngredientSet]) -> Result<Var, Error> {
    if sets.iter().any(IngredientSet::is_empty) {
        return Err(Error::Validation("target distribution of an empty set".into()));
    }
    let n = g.shape(logits)[1];
    let mut target = indicator_matrix::<F>(sets, n)?;
    for (r, s) in sets.iter().enumerate() {
        let k = F::from_usize(s.len()).unwrap();
        for v in &mut target.data_mut()[r * n..(r + 1) * n] {
            *v = *v / k;
        }
    }
    Ok(g.cross_entropy(logits, &target, 0.0)?)
}

/// `1 - sum(p s) / sum(p + s - p s)` with `p = sigmoid(logits)`, averaged
/// over the batch.
pub fn ff_iou_loss<F: Scalar>(g: &mut Graph<F>, logits: Var, sets: &[IngredientSet]) -> Result<Var, Error> {
    let n = g.shape(logits)[1];
    let s = g.constant(indicator_matrix::<F>(sets, n)?);
    let p = g.sigmoid(logits);
    let ps = g.mul(p, s)?;
    let inter = g.sum_axis(ps, 1)?;
    let union = g.add(p, s)?;
    let union = g.sub(union, ps)?;
    let union = g.sum_axis(union, 1)?;
    let ratio = g.div(inter, union)?;
    let ratio = g.mean(ratio);
    let neg = g.scale(ratio, -F::one());
    Ok(g.add_scalar(neg, F::one()))
}

/// Ingredient BCE plus cross-entropy of the cardinality head against `K`.
pub fn ff_dc_loss<F: Scalar>(
    g: &mut Graph<F>,
    logits: Var,
    card_logits: Var,
    sets: &[IngredientSet],
    smoothing: f64,
) -> Result<Var, Error> {
    let classes = g.shape(card_logits)[1];
    let mut target = vec![F::zero(); sets.len() * classes];
    for (r, s) in sets.iter().enumerate() {
        if s.len() >= classes {
            return Err(Error::Validation(format!(
                "cardinality {} outside the head's range 0..{}",
                s.len(),
                classes - 1
            )));
        }
        target[r * classes + s.len()] = F::one();
    }
    let bce = ff_bce_loss(g, logits, sets, smoothing)?;
    let ce = g.cross_entropy(card_logits, &Tensor::new(&[sets.len(), classes], target)?, 0.0)?;
    Ok(g.add(bce, ce)?)
}

/// Smallest prefix of the descending-probability order whose cumulative
/// probability strictly exceeds `threshold`; ties in probability go to the
/// lower id.
pub fn td_sample(probs: &[f64], threshold: f64) -> IngredientSet {
    let mut total = 0.0;
    let mut chosen = Vec::new();
    for id in rank_by_score(probs) {
        chosen.push(id);
        total += probs[id];
        if total > threshold {
            break;
        }
    }
    IngredientSet::new(chosen)
}

/// The `c` most probable ids, `c` being the cardinality head's argmax.
pub fn dc_sample(probs: &[f64], card_logits: &[f64]) -> IngredientSet {
    let c = argmax(card_logits).min(probs.len());
    IngredientSet::new(rank_by_score(probs).into_iter().take(c))
}

pub(crate) fn ff_sample<F: Scalar>(
    g: &mut Graph<F>,
    kind: IngredientModelKind,
    out: &FfOutput,
    opts: &SampleOptions,
) -> Result<Vec<IngredientPrediction>, Error> {
    let logits = g.value(out.logits);
    let (b, n) = (logits.shape()[0], logits.shape()[1]);
    let card = out.card_logits.map(|c| g.value(c).to_f64_vec());
    let mut preds = Vec::with_capacity(b);
    for r in 0..b {
        let z = &logits.data()[r * n..(r + 1) * n];
        let probs: Vec<f64> = if kind == IngredientModelKind::FfTd {
            let z: Vec<f64> = z.iter().map(|v| v.to_f64_lossy()).collect();
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        } else {
            z.iter().map(|&v| sigmoid(v).to_f64_lossy()).collect()
        };
        let set = match kind {
            IngredientModelKind::FfTd => td_sample(&probs, opts.threshold),
            IngredientModelKind::FfDc => {
                let card = card.as_ref().expect("cardinality head");
                let c = card.len() / b;
                dc_sample(&probs, &card[r * c..(r + 1) * c])
            }
            _ => probs
                .iter()
                .enumerate()
                .filter(|(_, &p)| p > opts.threshold)
                .map(|(i, _)| i)
                .collect(),
        };
        preds.push(IngredientPrediction {
            set,
            ranking: rank_by_score(&probs),
            scores: probs,
            step_probs: None,
            eos_step: None,
        });
    }
    Ok(preds)
}
