//! Ingredient prediction from image features.
//!
//! Seven models share one interface, [`IngredientModel`]:
//!
//! | kind              | architecture            | objective                              | sampler                  |
//! |-------------------|-------------------------|----------------------------------------|--------------------------|
//! | `tf-set`          | autoregressive decoder  | pooled BCE + eos BCE + cardinality     | greedy, eos stop         |
//! | `tf-list`         | autoregressive decoder  | teacher-forced NLL with eos class      | greedy until eos         |
//! | `tf-list-shuffle` | as `tf-list`            | NLL over a fresh permutation each time | greedy until eos         |
//! | `ff-bce`          | two-layer perceptron    | per-ingredient BCE                     | sigmoid > threshold      |
//! | `ff-td`           | two-layer perceptron    | cross-entropy against `s / K`          | cumulative-mass prefix   |
//! | `ff-iou`          | two-layer perceptron    | soft IoU                               | sigmoid > threshold      |
//! | `ff-dc`           | perceptron, two heads   | BCE + cardinality cross-entropy        | top-c by probability     |

mod ff;
mod list;
mod set;


use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{encode_batch, init_image_encoder, BlockSettings, DecoderStack, FusionStrategy, ModelConfig};
use crate::tensor::{Graph, Params, Scalar, Tensor, Var};
use crate::Error;

pub use ff::{dc_sample, ff_bce_loss, ff_dc_loss, ff_forward, ff_iou_loss, ff_td_loss, td_sample, FfOutput};
pub use list::{tf_list_loss, tf_list_sample};
pub use set::{pool_over_time, tf_set_forward, tf_set_loss, tf_set_sample, SetLossWeights, TfSetOutput};

pub(crate) const DECODER: &str = "ingredient_decoder";
pub(crate) const EMBED: &str = "ingredient_decoder.embed";
pub(crate) const OUT: &str = "ingredient_decoder.out";
pub(crate) const EOS: &str = "ingredient_decoder.eos";
pub(crate) const FF_HIDDEN: &str = "ingredient_ff.hidden";
pub(crate) const FF_OUT: &str = "ingredient_ff.out";
pub(crate) const FF_CARD: &str = "ingredient_ff.card";

/// A set of ingredient ids, stored sorted and without repeats.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IngredientSet {
    ids: Vec<usize>,
}

impl IngredientSet {
    pub fn new(ids: impl IntoIterator<Item = usize>) -> Self {
        let mut ids: Vec<usize> = ids.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        IngredientSet { ids }
    }

    pub fn empty() -> Self {
        IngredientSet { ids: Vec::new() }
    }

    /// Builds the set of a ground-truth list, rejecting repeats and ids
    /// outside the dictionary.
    pub fn from_list(list: &[usize], n: usize) -> Result<Self, Error> {
        validate_list(list, n)?;
        Ok(Self::new(list.iter().copied()))
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.ids.binary_search(&id).is_ok()
    }

    /// Binary indicator vector `s` of length `n`.
    pub fn indicator(&self, n: usize) -> Vec<f64> {
        let mut s = vec![0.0; n];
        for &i in &self.ids {
            s[i] = 1.0;
        }
        s
    }

    pub fn intersection_len(&self, other: &IngredientSet) -> usize {
        self.ids.iter().filter(|&&i| other.contains(i)).count()
    }
}

impl FromIterator<usize> for IngredientSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Self::new(iter)
    }
}

pub(crate) fn validate_list(list: &[usize], n: usize) -> Result<(), Error> {
    let mut seen = vec![false; n];
    for &id in list {
        if id >= n {
            return Err(Error::Validation(format!("ingredient id {id} outside dictionary of {n}")));
        }
        if std::mem::replace(&mut seen[id], true) {
            return Err(Error::Validation(format!("ingredient id {id} repeated")));
        }
    }
    Ok(())
}

/// `[rows, n]` matrix whose rows are the indicator vectors of `sets`.
pub(crate) fn indicator_matrix<F: Scalar>(sets: &[IngredientSet], n: usize) -> Result<Tensor<F>, Error> {
    let mut data = Vec::with_capacity(sets.len() * n);
    for s in sets {
        if let Some(&bad) = s.ids().iter().find(|&&i| i >= n) {
            return Err(Error::Validation(format!("ingredient id {bad} outside dictionary of {n}")));
        }
        data.extend(s.indicator(n).into_iter().map(F::from_f64_lossy));
    }
    Ok(Tensor::new(&[sets.len(), n], data)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IngredientModelKind {
    TfSet,
    TfList,
    TfListShuffle,
    FfBce,
    FfTd,
    FfIou,
    FfDc,
}

impl IngredientModelKind {
    pub const ALL: [IngredientModelKind; 7] = [
        IngredientModelKind::TfSet,
        IngredientModelKind::TfList,
        IngredientModelKind::TfListShuffle,
        IngredientModelKind::FfBce,
        IngredientModelKind::FfTd,
        IngredientModelKind::FfIou,
        IngredientModelKind::FfDc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            IngredientModelKind::TfSet => "tf-set",
            IngredientModelKind::TfList => "tf-list",
            IngredientModelKind::TfListShuffle => "tf-list-shuffle",
            IngredientModelKind::FfBce => "ff-bce",
            IngredientModelKind::FfTd => "ff-td",
            IngredientModelKind::FfIou => "ff-iou",
            IngredientModelKind::FfDc => "ff-dc",
        }
    }

    pub fn is_transformer(self) -> bool {
        matches!(
            self,
            IngredientModelKind::TfSet | IngredientModelKind::TfList | IngredientModelKind::TfListShuffle
        )
    }
}

impl fmt::Display for IngredientModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for IngredientModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ingredient model `{s}`")))
    }
}

/// Ground truth for a training batch.
#[derive(Clone, Debug)]
pub struct IngredientBatch<F> {
    /// `[B, P, d]` features, or `[B, H, W, C]` images for the conv encoder.
    pub images: Tensor<F>,
    /// Ingredient lists in dataset order.
    pub lists: Vec<Vec<usize>>,
}

impl<F: Scalar> IngredientBatch<F> {
    pub fn sets(&self) -> Vec<IngredientSet> {
        self.lists.iter().map(|l| IngredientSet::new(l.iter().copied())).collect()
    }
}

/// Loss hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    /// Applied to the BCE objectives (`tf-set`, `ff-bce`, `ff-dc`).
    pub label_smoothing: f64,
    pub set_weights: SetLossWeights,
}

impl Default for LossOptions {
    fn default() -> Self {
        LossOptions {
            label_smoothing: 0.1,
            set_weights: SetLossWeights::default(),
        }
    }
}

/// A model's prediction for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct IngredientPrediction {
    pub set: IngredientSet,
    /// Every dictionary id, best first (the ranking used for P@K).
    pub ranking: Vec<usize>,
    /// Per-id score behind the ranking: pooled probability for `tf-set`,
    /// the best step probability for `tf-list`, output probability for the
    /// feed-forward models.
    pub scores: Vec<f64>,
    /// Per-step ingredient distributions of the transformer models.
    pub step_probs: Option<Vec<Vec<f64>>>,
    /// Decode step at which the transformer stopped.
    pub eos_step: Option<usize>,
}

/// Ids sorted by descending score, ties to the lower id.
pub(crate) fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..scores.len()).collect();
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids
}

/// Index of the largest value, ties to the lower index.
pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inference settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOptions {
    /// Probability threshold for `ff-bce`/`ff-iou` and cumulative-mass
    /// threshold for `ff-td`.
    pub threshold: f64,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions { threshold: 0.5 }
    }
}

/// Architecture and wiring of one ingredient predictor.
#[derive(Clone, Debug)]
pub struct IngredientModel {
    pub kind: IngredientModelKind,
    pub config: ModelConfig,
}

impl IngredientModel {
    pub fn new(kind: IngredientModelKind, config: ModelConfig) -> Result<Self, Error> {
        config.validate()?;
        if kind.is_transformer() && config.n_ingredients < config.max_ingredients {
            return Err(Error::Config(format!(
                "a dictionary of {} cannot fill {} masked decode steps",
                config.n_ingredients, config.max_ingredients
            )));
        }
        Ok(IngredientModel { kind, config })
    }

    pub(crate) fn stack(&self) -> DecoderStack {
        let c = &self.config;
        DecoderStack {
            prefix: DECODER.into(),
            n_blocks: c.ingredient_decoder.n_blocks,
            strategy: FusionStrategy::SingleCondition,
            settings: BlockSettings::new(c.d_model, &c.ingredient_decoder, c.dropout, c.layer_norm_eps),
        }
    }

    /// Initializes the image encoder and the predictor's own parameters.
    pub fn init<F: Scalar, R: Rng>(&self, p: &mut Params<F>, rng: &mut R) {
        let c = &self.config;
        let (d, n) = (c.d_model, c.n_ingredients);
        init_image_encoder(p, rng, c);
        match self.kind {
            IngredientModelKind::TfSet | IngredientModelKind::TfList | IngredientModelKind::TfListShuffle => {
                self.stack().init(p, rng);
                p.init_normal(rng, EMBED, &[n + 1, d], 1.0);
                let classes = if self.kind == IngredientModelKind::TfSet { n } else { n + 1 };
                crate::nn::init_linear(p, rng, OUT, d, classes);
                if self.kind == IngredientModelKind::TfSet {
                    crate::nn::init_linear(p, rng, EOS, d, 1);
                }
            }
            _ => {
                crate::nn::init_linear(p, rng, FF_HIDDEN, d, d);
                crate::nn::init_linear(p, rng, FF_OUT, d, n);
                if self.kind == IngredientModelKind::FfDc {
                    crate::nn::init_linear(p, rng, FF_CARD, d, c.max_ingredients + 1);
                }
            }
        }
    }

    /// Image encoder output `[B, P, d]`.
    pub fn encode<F: Scalar>(&self, g: &mut Graph<F>, p: &Params<F>, images: &Tensor<F>) -> Result<Var, Error> {
        let x = g.constant(images.clone());
        encode_batch(g, p, &self.config, x)
    }

    /// Training objective on a batch. `tf-list-shuffle` permutes each list
    /// with the graph's random stream.
    pub fn loss<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &Params<F>,
        batch: &IngredientBatch<F>,
        opts: &LossOptions,
    ) -> Result<Var, Error> {
        let n = self.config.n_ingredients;
        for l in &batch.lists {
            validate_list(l, n)?;
        }
        let img = self.encode(g, p, &batch.images)?;
        let eps = opts.label_smoothing;
        match self.kind {
            IngredientModelKind::TfSet => {
                let out = tf_set_forward(g, p, self, img, self.config.max_ingredients)?;
                let sets = batch.sets();
                let pooled = out.pool_first_k(g, &sets)?;
                tf_set_loss(g, pooled, out.eos_logits, &sets, eps, opts.set_weights)
            }
            IngredientModelKind::TfList => tf_list_loss(g, p, self, img, &batch.lists),
            IngredientModelKind::TfListShuffle => {
                let mut lists = batch.lists.clone();
                for l in &mut lists {
                    use rand::seq::SliceRandom;
                    l.shuffle(g.rng());
                }
                tf_list_loss(g, p, self, img, &lists)
            }
            kind => {
                let out = ff_forward(g, p, self, img)?;
                let sets = batch.sets();
                match kind {
                    IngredientModelKind::FfBce => ff_bce_loss(g, out.logits, &sets, eps),
                    IngredientModelKind::FfTd => ff_td_loss(g, out.logits, &sets),
                    IngredientModelKind::FfIou => ff_iou_loss(g, out.logits, &sets),
                    _ => ff_dc_loss(g, out.logits, out.card_logits.expect("cardinality head"), &sets, eps),
                }
            }
        }
    }

    /// Predicts ingredient sets for a batch of images.
    pub fn predict<F: Scalar>(
        &self,
        p: &Params<F>,
        images: &Tensor<F>,
        opts: &SampleOptions,
    ) -> Result<Vec<IngredientPrediction>, Error> {
        let mut g = Graph::new();
        let img = self.encode(&mut g, p, images)?;
        match self.kind {
            IngredientModelKind::TfSet => tf_set_sample(&mut g, p, self, img),
            IngredientModelKind::TfList | IngredientModelKind::TfListShuffle => tf_list_sample(&mut g, p, self, img),
            kind => {
                let out = ff_forward(&mut g, p, self, img)?;
                ff::ff_sample(&mut g, kind, &out, opts)
            }
        }
    }
}
