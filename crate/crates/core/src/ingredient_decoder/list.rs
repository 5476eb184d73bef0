use std::collections::HashSet;

use super::{argmax, IngredientModel, IngredientPrediction, IngredientSet, EMBED, OUT};
use crate::nn::{linear, Condition, Conditioning};
use crate::tensor::{Graph, Mask, Params, Scalar, Tensor, Var};
use crate::Error;

/// Teacher-forced negative log-likelihood of each list followed by the eos
/// class `N`, averaged over all `K + 1` targets of the batch.
pub fn tf_list_loss<F: Scalar>(
    g: &mut Graph<F>,
    p: &Params<F>,
    model: &IngredientModel,
    img: Var,
    lists: &[Vec<usize>],
) -> Result<Var, Error> {
    let n = model.config.n_ingredients;
    let b = g.shape(img)[0];
    if lists.len() != b {
        return Err(Error::Validation(format!("{} lists for a batch of {b}", lists.len())));
    }
    for l in lists {
        super::validate_list(l, n)?;
    }
    let t = lists.iter().map(Vec::len).max().unwrap_or(0) + 1;
    let mut ids = Vec::with_capacity(b * t);
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (bi, l) in lists.iter().enumerate() {
        ids.push(n);
        ids.extend_from_slice(l);
        ids.extend(std::iter::repeat_n(n, t - 1 - l.len()));
        for (i, &target) in l.iter().chain(std::iter::once(&n)).enumerate() {
            rows.push(bi * t + i);
            targets.push(target);
        }
    }
    let stack = model.stack();
    let cond = Conditioning {
        image: Some(Condition { rows: img, mask: None }),
        ingredients: None,
    };
    let x = stack.embed(g, p, EMBED, &ids, b, 0)?;
    let h = stack.forward(g, p, x, &cond)?;
    let logits = linear(g, p, OUT, h)?;
    let logits = g.reshape(logits, &[b * t, n + 1])?;
    let logits = g.index_select(logits, 0, &rows)?;
    let mut onehot = vec![F::zero(); targets.len() * (n + 1)];
    for (r, &c) in targets.iter().enumerate() {
        onehot[r * (n + 1) + c] = F::one();
    }
    let target = Tensor::new(&[targets.len(), n + 1], onehot)?;
    Ok(g.cross_entropy(logits, &target, 0.0)?)
}

/// Greedy decoding until the eos class wins or `K_max` ingredients are
/// chosen; chosen ids are masked at later steps.
pub fn tf_list_sample<F: Scalar>(
    g: &mut Graph<F>,
    p: &Params<F>,
    model: &IngredientModel,
    img: Var,
) -> Result<Vec<IngredientPrediction>, Error> {
    let n = model.config.n_ingredients;
    let steps = model.config.max_ingredients;
    let b = g.shape(img)[0];
    let stack = model.stack();
    let cond = Conditioning {
        image: Some(Condition { rows: img, mask: None }),
        ingredients: None,
    };
    let mut state = stack.start(g, p, &cond)?;
    let mut prev = vec![n; b];
    let mut chosen: Vec<Vec<usize>> = vec![Vec::new(); b];
    let mut stopped: Vec<Option<usize>> = vec![None; b];
    let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); b];
    let mut blocked = vec![false; b * (n + 1)];
    for t in 0..steps {
        if stopped.iter().all(Option::is_some) {
            break;
        }
        let x = stack.embed(g, p, EMBED, &prev, b, t)?;
        let h = stack.step(g, p, &mut state, x)?;
        let logits = linear(g, p, OUT, h)?;
        let logits = g.masked_fill(logits, &Mask::new(&[b, 1, n + 1], blocked.clone())?, F::neg_infinity())?;
        let pr = g.softmax(logits, 2)?;
        let values = g.value(pr).to_f64_vec();
        for bi in 0..b {
            if stopped[bi].is_some() {
                continue;
            }
            let row = &values[bi * (n + 1)..(bi + 1) * (n + 1)];
            rows[bi].push(row[..n].to_vec());
            let id = argmax(row);
            if id == n {
                stopped[bi] = Some(t);
            } else {
                chosen[bi].push(id);
                blocked[bi * (n + 1) + id] = true;
                prev[bi] = id;
            }
        }
    }
    Ok((0..b)
        .map(|bi| {
            let mut scores = vec![0.0f64; n];
            for row in &rows[bi] {
                for (s, &v) in scores.iter_mut().zip(row) {
                    *s = s.max(v);
                }
            }
            // First-occurrence order, then the rest by best step probability.
            let mut ranking = chosen[bi].clone();
            let seen: HashSet<usize> = ranking.iter().copied().collect();
            let mut rest: Vec<usize> = (0..n).filter(|i| !seen.contains(i)).collect();
            rest.sort_by(|&a, &c| scores[c].total_cmp(&scores[a]).then(a.cmp(&c)));
            ranking.extend(rest);
            IngredientPrediction {
                set: IngredientSet::new(chosen[bi].iter().copied()),
                ranking,
                scores,
                step_probs: Some(std::mem::take(&mut rows[bi])),
                eos_step: stopped[bi],
            }
        })
        .collect())
}
