//! Ingredient and instruction evaluation.
//!
//! Set metrics follow the Pascal VOC convention: true/false positive and
//! false negative counts are accumulated over a whole split before any
//! ratio is taken.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::ingredient_decoder::IngredientSet;
use crate::vocab::{normalize_name, split_words, IngredientVocabulary};
use crate::Error;

/// Per-ingredient TP/FP/FN counters over a sample stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
    samples: u64,
}

impl ConfusionAccumulator {
    pub fn new(n_ingredients: usize) -> Self {
        ConfusionAccumulator {
            tp: vec![0; n_ingredients],
            fp: vec![0; n_ingredients],
            fn_: vec![0; n_ingredients],
            samples: 0,
        }
    }

    pub fn n_ingredients(&self) -> usize {
        self.tp.len()
    }

    pub fn update(&mut self, predicted: &IngredientSet, gt: &IngredientSet) -> Result<(), Error> {
        let n = self.n_ingredients();
        if let Some(&id) = predicted.ids().iter().chain(gt.ids()).find(|&&id| id >= n) {
            return Err(Error::Validation(format!("ingredient id {id} outside a dictionary of {n}")));
        }
        for &id in predicted.ids() {
            if gt.contains(id) {
                self.tp[id] += 1;
            } else {
                self.fp[id] += 1;
            }
        }
        for &id in gt.ids() {
            if !predicted.contains(id) {
                self.fn_[id] += 1;
            }
        }
        self.samples += 1;
        Ok(())
    }

    /// Adds another accumulator's counts.
    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<(), Error> {
        if other.n_ingredients() != self.n_ingredients() {
            return Err(Error::Validation("accumulators over different dictionaries".into()));
        }
        for i in 0..self.tp.len() {
            self.tp[i] += other.tp[i];
            self.fp[i] += other.fp[i];
            self.fn_[i] += other.fn_[i];
        }
        self.samples += other.samples;
        Ok(())
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    /// Global `(TP, FP, FN)`.
    pub fn totals(&self) -> (u64, u64, u64) {
        (self.tp.iter().sum(), self.fp.iter().sum(), self.fn_.iter().sum())
    }

    /// `(TP, FP, FN)` of one ingredient.
    pub fn counts(&self, id: usize) -> (u64, u64, u64) {
        (self.tp[id], self.fp[id], self.fn_[id])
    }

    /// `TP / (TP + FP + FN)` and `2TP / (2TP + FP + FN)` over global sums.
    pub fn global_iou_f1(&self) -> Result<(f64, f64), Error> {
        let (tp, fp, fn_) = self.totals();
        if tp + fp + fn_ == 0 {
            return Err(Error::Validation("IoU and F1 are undefined without any positives".into()));
        }
        let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
        Ok((tp / (tp + fp + fn_), 2.0 * tp / (2.0 * tp + fp + fn_)))
    }

    /// F1 of every ingredient that was predicted or present at least once,
    /// best first, ties to the lower id.
    pub fn per_ingredient_f1(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = (0..self.n_ingredients())
            .filter_map(|i| {
                let (tp, fp, fn_) = self.counts(i);
                let denom = 2 * tp + fp + fn_;
                (denom > 0).then(|| (i, 2.0 * tp as f64 / denom as f64))
            })
            .collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        out
    }
}

/// Absolute set-size error statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CardinalityStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub mean_pred_size: f64,
}

/// `| |pred| - |gt| |` over `(predicted size, true size)` pairs.
pub fn cardinality_error(sizes: &[(usize, usize)]) -> Result<CardinalityStats, Error> {
    if sizes.is_empty() {
        return Err(Error::Validation("cardinality error of no samples".into()));
    }
    let n = sizes.len() as f64;
    let errs: Vec<f64> = sizes.iter().map(|&(p, g)| p.abs_diff(g) as f64).collect();
    let mean = errs.iter().sum::<f64>() / n;
    let var = errs.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    Ok(CardinalityStats {
        mean,
        std: var.sqrt(),
        mean_pred_size: sizes.iter().map(|&(p, _)| p as f64).sum::<f64>() / n,
    })
}

/// `|top-K ∩ gt| / K`.
pub fn precision_at_k(ranked: &[usize], gt: &IngredientSet, k: usize) -> Result<f64, Error> {
    if k == 0 {
        return Err(Error::Validation("P@K needs K >= 1".into()));
    }
    let hits = ranked.iter().take(k).filter(|&&id| gt.contains(id)).count();
    Ok(hits as f64 / k as f64)
}

/// Mean of [`precision_at_k`] over paired rankings and ground truths.
pub fn mean_precision_at_k(ranked: &[Vec<usize>], gt: &[IngredientSet], k: usize) -> Result<f64, Error> {
    if ranked.is_empty() || ranked.len() != gt.len() {
        return Err(Error::Validation(format!("{} rankings for {} ground truths", ranked.len(), gt.len())));
    }
    let mut total = 0.0;
    for (r, g) in ranked.iter().zip(gt) {
        total += precision_at_k(r, g, k)?;
    }
    Ok(total / ranked.len() as f64)
}

/// Ingredient mention scores of generated instructions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MentionScores {
    pub recall: f64,
    pub precision: f64,
    /// False when nothing was mentioned and `precision` is a stand-in 0.
    pub precision_defined: bool,
    /// False when the reference set is empty and `recall` is a stand-in 0.
    pub recall_defined: bool,
}

/// Vocabulary ids whose canonical name equals a normalized word n-gram of
/// some segment.
pub fn mentioned_ingredients<S: AsRef<str>>(instructions: &[S], vocab: &IngredientVocabulary) -> IngredientSet {
    let longest = vocab.names().iter().map(|n| n.split(' ').count()).max().unwrap_or(0);
    let mut found = BTreeSet::new();
    for seg in instructions {
        let words = split_words(seg.as_ref());
        for start in 0..words.len() {
            for len in 1..=longest.min(words.len() - start) {
                let gram = words[start..start + len].join(" ");
                if let Ok(name) = normalize_name(&gram) {
                    if let Some(id) = vocab.id(&name) {
                        found.insert(id);
                    }
                }
            }
        }
    }
    IngredientSet::new(found)
}

/// Share of `gt` mentioned in the instructions, and share of mentioned
/// ingredients that are in `gt`.
pub fn instruction_ingredient_pr<S: AsRef<str>>(
    instructions: &[S],
    gt: &IngredientSet,
    vocab: &IngredientVocabulary,
) -> MentionScores {
    let mentioned = mentioned_ingredients(instructions, vocab);
    let hit = mentioned.intersection_len(gt) as f64;
    MentionScores {
        recall: if gt.is_empty() { 0.0 } else { hit / gt.len() as f64 },
        precision: if mentioned.is_empty() { 0.0 } else { hit / mentioned.len() as f64 },
        precision_defined: !mentioned.is_empty(),
        recall_defined: !gt.is_empty(),
    }
}

/// Evaluation summary written by the `evaluate` command. Absent parts are
/// `null`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub iou: Option<f64>,
    pub f1: Option<f64>,
    pub card_error_mean: Option<f64>,
    pub card_error_std: Option<f64>,
    pub mean_pred_size: Option<f64>,
    pub p_at_k: BTreeMap<usize, f64>,
    pub instr_recall: Option<f64>,
    pub instr_precision: Option<f64>,
    pub perplexity: Option<f64>,
}

impl EvaluationReport {
    /// Set metrics of predicted ingredients against ground truth, plus
    /// P@K of the rankings for each `k`.
    pub fn for_ingredients(
        predicted: &[IngredientSet],
        rankings: &[Vec<usize>],
        gt: &[IngredientSet],
        n_ingredients: usize,
        ks: &[usize],
    ) -> Result<Self, Error> {
        if predicted.len() != gt.len() || rankings.len() != gt.len() {
            return Err(Error::Validation(format!(
                "{} predictions and {} rankings for {} ground truths",
                predicted.len(),
                rankings.len(),
                gt.len()
            )));
        }
        let mut acc = ConfusionAccumulator::new(n_ingredients);
        for (p, g) in predicted.iter().zip(gt) {
            acc.update(p, g)?;
        }
        let (iou, f1) = acc.global_iou_f1()?;
        let sizes: Vec<(usize, usize)> = predicted.iter().zip(gt).map(|(p, g)| (p.len(), g.len())).collect();
        let card = cardinality_error(&sizes)?;
        let mut p_at_k = BTreeMap::new();
        for &k in ks {
            p_at_k.insert(k, mean_precision_at_k(rankings, gt, k)?);
        }
        Ok(EvaluationReport {
            iou: Some(iou),
            f1: Some(f1),
            card_error_mean: Some(card.mean),
            card_error_std: Some(card.std),
            mean_pred_size: Some(card.mean_pred_size),
            p_at_k,
            ..Default::default()
        })
    }
}

/// Mean mention recall and precision over recipes, each averaged over the
/// recipes where it is defined.
pub fn mean_mention_scores(scores: &[MentionScores]) -> (Option<f64>, Option<f64>) {
    let mean = |vals: Vec<f64>| (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
    (
        mean(scores.iter().filter(|s| s.recall_defined).map(|s| s.recall).collect()),
        mean(scores.iter().filter(|s| s.precision_defined).map(|s| s.precision).collect()),
    )
}

#[cfg(test)]
mod tests;
