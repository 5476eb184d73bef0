//! Title and instruction generation conditioned on image features and an
//! ingredient set.
//!
//! A recipe is one token stream: `<sor>`, the title, `<eoi>`, each
//! instruction followed by `<eoi>`, then `<eor>`. The decoder is trained
//! with teacher forcing and decodes greedily.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{stack_images, Example};
use crate::ingredient_decoder::IngredientSet;
use crate::nn::{
    encode_batch, init_image_encoder, init_linear, key_padding_mask, linear, BlockSettings, Condition, Conditioning,
    DecoderStack, FusionStrategy, ModelConfig,
};
use crate::tensor::{Graph, Mask, Params, Scalar, Tensor, Var};
use crate::vocab::{split_segments, IngredientVocabulary, WordVocabulary, EOR_ID, SOR_ID};
use crate::Error;

pub const DECODER: &str = "instruction_decoder";
pub const WORD_EMBED: &str = "instruction_decoder.embed";
pub const WORD_OUT: &str = "instruction_decoder.out";
/// Ingredient embedding table `[N, d]` producing `e_L`.
pub const INGREDIENT_EMBED: &str = "ingredient_encoder.embed";

const EVAL_BATCH: usize = 32;

/// Which conditions the decoder sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Image features and ingredients, combined by the fusion strategy.
    Full,
    /// Image features only.
    I2r,
    /// Ingredients only.
    L2r,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::L2r, Ablation::I2r];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::I2r => "i2r",
            Ablation::L2r => "l2r",
        }
    }

    pub fn uses_image(self) -> bool {
        self != Ablation::L2r
    }

    pub fn uses_ingredients(self) -> bool {
        self != Ablation::I2r
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation `{s}` (full, i2r, l2r)")))
    }
}

/// Architecture and wiring of the instruction decoder.
#[derive(Clone, Debug)]
pub struct RecipeModel {
    pub ablation: Ablation,
    /// Fusion of the full model; the ablations attend over their single
    /// source.
    pub strategy: FusionStrategy,
    pub config: ModelConfig,
}

impl RecipeModel {
    pub fn new(ablation: Ablation, strategy: FusionStrategy, config: ModelConfig) -> Result<Self, Error> {
        config.validate()?;
        if ablation == Ablation::Full && strategy == FusionStrategy::SingleCondition {
            return Err(Error::Config("the full model needs a two-source fusion strategy".into()));
        }
        Ok(RecipeModel {
            ablation,
            strategy,
            config,
        })
    }

    /// Fusion strategy actually wired into the blocks.
    pub fn wiring(&self) -> FusionStrategy {
        match self.ablation {
            Ablation::Full => self.strategy,
            _ => FusionStrategy::SingleCondition,
        }
    }

    pub(crate) fn stack(&self) -> DecoderStack {
        let c = &self.config;
        DecoderStack {
            prefix: DECODER.into(),
            n_blocks: c.instruction_decoder.n_blocks,
            strategy: self.wiring(),
            settings: BlockSettings::new(c.d_model, &c.instruction_decoder, c.dropout, c.layer_norm_eps),
        }
    }

    /// Conditioning rows the decoder attends over for a `k`-ingredient set.
    pub fn condition_positions(&self, k: usize) -> usize {
        let p = self.config.image_positions;
        match self.ablation {
            Ablation::Full => p + k,
            Ablation::I2r => p,
            Ablation::L2r => k,
        }
    }

    pub fn init<F: Scalar, R: Rng>(&self, p: &mut Params<F>, rng: &mut R) {
        let c = &self.config;
        if self.ablation.uses_image() {
            init_image_encoder(p, rng, c);
        }
        if self.ablation.uses_ingredients() {
            p.init_normal(rng, INGREDIENT_EMBED, &[c.n_ingredients, c.d_model], 1.0);
        }
        self.stack().init(p, rng);
        p.init_normal(rng, WORD_EMBED, &[c.vocab_size, c.d_model], 1.0);
        init_linear(p, rng, WORD_OUT, c.d_model, c.vocab_size);
    }

    /// Builds `e_I` from `[B, P, d]` features and `e_L` from `sets`, as the
    /// ablation requires.
    pub fn conditioning<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &Params<F>,
        images: Option<&Tensor<F>>,
        sets: Option<&[IngredientSet]>,
    ) -> Result<Conditioning, Error> {
        let mut cond = Conditioning::default();
        if self.ablation.uses_image() {
            let images = images.ok_or_else(|| Error::Validation(format!("{} needs image features", self.ablation.name())))?;
            let x = g.constant(images.clone());
            cond.image = Some(Condition {
                rows: encode_batch(g, p, &self.config, x)?,
                mask: None,
            });
        }
        if self.ablation.uses_ingredients() {
            let sets = sets.ok_or_else(|| Error::Validation(format!("{} needs ingredients", self.ablation.name())))?;
            cond.ingredients = Some(encode_ingredient_batch(g, p, sets, self.config.n_ingredients)?);
        }
        if let (Some(i), Some(l)) = (&cond.image, &cond.ingredients) {
            if g.shape(i.rows)[0] != g.shape(l.rows)[0] {
                return Err(Error::Validation("image and ingredient batches differ in size".into()));
            }
        }
        Ok(cond)
    }

    /// Output logits `[B, T, V]` for `inputs` (row-major `[B, T]`).
    pub fn logits<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &Params<F>,
        cond: &Conditioning,
        inputs: &[usize],
        b: usize,
    ) -> Result<Var, Error> {
        if b == 0 || inputs.len() % b != 0 {
            return Err(Error::Validation(format!("{} input ids do not split into {b} rows", inputs.len())));
        }
        self.check_ids(inputs)?;
        let cond = canonical_conditioning(g, cond)?;
        let stack = self.stack();
        let x = stack.embed(g, p, WORD_EMBED, inputs, b, 0)?;
        let h = stack.forward(g, p, x, &cond)?;
        Ok(linear(g, p, WORD_OUT, h)?)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), Error> {
        let v = self.config.vocab_size;
        match ids.iter().find(|&&t| t >= v) {
            Some(t) => Err(Error::Validation(format!("token id {t} outside a vocabulary of {v}"))),
            None => Ok(()),
        }
    }

    fn check_sequence(&self, tokens: &[usize]) -> Result<(), Error> {
        let t_max = self.config.max_instruction_words;
        if tokens.len() < 2 || tokens[0] != SOR_ID || tokens[tokens.len() - 1] != EOR_ID {
            return Err(Error::Validation("token sequence must start with <sor> and end with <eor>".into()));
        }
        if tokens.len() > t_max {
            return Err(Error::Validation(format!("{} tokens exceed the limit of {t_max}", tokens.len())));
        }
        self.check_ids(tokens)
    }

    /// Teacher-forced mean negative log-likelihood per target token, and
    /// the number of target tokens. Every token after `<sor>` is a target.
    pub fn instruction_nll<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &Params<F>,
        cond: &Conditioning,
        tokens: &[Vec<usize>],
    ) -> Result<(Var, usize), Error> {
        for t in tokens {
            self.check_sequence(t)?;
        }
        let b = tokens.len();
        if b == 0 {
            return Err(Error::Validation("no token sequences".into()));
        }
        let t = tokens.iter().map(|s| s.len() - 1).max().unwrap();
        let v = self.config.vocab_size;
        let mut inputs = Vec::with_capacity(b * t);
        let mut rows = Vec::new();
        let mut target = Vec::new();
        for (bi, seq) in tokens.iter().enumerate() {
            inputs.extend_from_slice(&seq[..seq.len() - 1]);
            inputs.extend(std::iter::repeat(EOR_ID).take(t + 1 - seq.len()));
            for (ti, &next) in seq[1..].iter().enumerate() {
                rows.push(bi * t + ti);
                let mut one = vec![F::zero(); v];
                one[next] = F::one();
                target.extend(one);
            }
        }
        let logits = self.logits(g, p, cond, &inputs, b)?;
        let flat = g.reshape(logits, &[b * t, v])?;
        let picked = g.index_select(flat, 0, &rows)?;
        let target = Tensor::new(&[rows.len(), v], target)?;
        Ok((g.cross_entropy(picked, &target, 0.0)?, rows.len()))
    }

    /// Greedy decoding from `<sor>` until `<eor>` or the token limit.
    pub fn generate<F: Scalar>(
        &self,
        p: &Params<F>,
        images: Option<&Tensor<F>>,
        sets: Option<&[IngredientSet]>,
    ) -> Result<Vec<GeneratedTokens>, Error> {
        let mut g = Graph::new();
        let cond = self.conditioning(&mut g, p, images, sets)?;
        let b = batch_size(&g, &cond);
        let cond = canonical_conditioning(&mut g, &cond)?;
        let stack = self.stack();
        let mut state = stack.start(&mut g, p, &cond)?;
        let t_max = self.config.max_instruction_words;
        let v = self.config.vocab_size;
        let mut seqs: Vec<Vec<usize>> = vec![vec![SOR_ID]; b];
        let mut done = vec![false; b];
        while seqs.iter().any(|s| s.len() < t_max) && done.iter().any(|d| !d) {
            let last: Vec<usize> = seqs.iter().map(|s| *s.last().unwrap()).collect();
            let x = stack.embed(&mut g, p, WORD_EMBED, &last, b, state.position())?;
            let h = stack.step(&mut g, p, &mut state, x)?;
            let logits = linear(&mut g, p, WORD_OUT, h)?;
            let lv = g.value(logits).to_f64_vec();
            for bi in 0..b {
                if done[bi] {
                    continue;
                }
                let next = argmax(&lv[bi * v..(bi + 1) * v]);
                seqs[bi].push(next);
                if next == EOR_ID || seqs[bi].len() >= t_max {
                    done[bi] = true;
                }
            }
        }
        Ok(seqs.into_iter().map(GeneratedTokens::from_tokens).collect())
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn batch_size<F: Scalar>(g: &Graph<F>, cond: &Conditioning) -> usize {
    let c = cond.image.as_ref().or(cond.ingredients.as_ref()).expect("at least one condition");
    g.shape(c.rows)[0]
}

/// Embedding rows of one ingredient set, in ascending id order: `[K, d]`.
pub fn encode_ingredients<F: Scalar>(g: &mut Graph<F>, p: &Params<F>, set: &IngredientSet) -> Result<Var, Error> {
    if set.is_empty() {
        return Err(Error::Validation("cannot encode an empty ingredient set".into()));
    }
    let table = g.param(p, INGREDIENT_EMBED)?;
    let n = g.shape(table)[0];
    if let Some(&bad) = set.ids().iter().find(|&&i| i >= n) {
        return Err(Error::Validation(format!("ingredient id {bad} outside dictionary of {n}")));
    }
    Ok(g.embedding(table, set.ids())?)
}

/// `[B, K_max, d]` ingredient rows, padded and masked when set sizes differ.
pub fn encode_ingredient_batch<F: Scalar>(
    g: &mut Graph<F>,
    p: &Params<F>,
    sets: &[IngredientSet],
    n_ingredients: usize,
) -> Result<Condition, Error> {
    if sets.is_empty() {
        return Err(Error::Validation("empty ingredient batch".into()));
    }
    if sets.iter().any(|s| s.is_empty()) {
        return Err(Error::Validation("cannot encode an empty ingredient set".into()));
    }
    let k = sets.iter().map(|s| s.len()).max().unwrap();
    let mut ids = Vec::with_capacity(sets.len() * k);
    for s in sets {
        if let Some(&bad) = s.ids().iter().find(|&&i| i >= n_ingredients) {
            return Err(Error::Validation(format!("ingredient id {bad} outside dictionary of {n_ingredients}")));
        }
        ids.extend_from_slice(s.ids());
        ids.extend(std::iter::repeat(0).take(k - s.len()));
    }
    let table = g.param(p, INGREDIENT_EMBED)?;
    let d = g.shape(table)[1];
    let rows = g.embedding(table, &ids)?;
    let rows = g.reshape(rows, &[sets.len(), k, d])?;
    let lengths: Vec<usize> = sets.iter().map(|s| s.len()).collect();
    let mask = lengths.iter().any(|&l| l != k).then(|| key_padding_mask(&lengths, k));
    Ok(Condition { rows, mask })
}

/// Reorders each sample's unmasked ingredient rows lexicographically by
/// value, so the decoder's arithmetic does not depend on the order the
/// rows arrive in.
pub fn canonical_conditioning<F: Scalar>(g: &mut Graph<F>, cond: &Conditioning) -> Result<Conditioning, Error> {
    let Some(ingr) = &cond.ingredients else {
        return Ok(cond.clone());
    };
    let shape = g.shape(ingr.rows).to_vec();
    let (b, k, d) = (shape[0], shape[1], shape[2]);
    let values = g.value(ingr.rows).data().to_vec();
    let mut order = Vec::with_capacity(b * k);
    for bi in 0..b {
        let valid = (0..k).filter(|&j| !ingr.mask.as_ref().is_some_and(|m| padded(m, bi, j))).count();
        let row = |j: usize| &values[(bi * k + j) * d..(bi * k + j + 1) * d];
        let mut idx: Vec<usize> = (0..valid).collect();
        idx.sort_by(|&x, &y| {
            row(x)
                .iter()
                .zip(row(y))
                .map(|(a, c)| a.to_f64_lossy().total_cmp(&c.to_f64_lossy()))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        order.extend(idx.into_iter().chain(valid..k).map(|j| bi * k + j));
    }
    let flat = g.reshape(ingr.rows, &[b * k, d])?;
    let sorted = g.index_select(flat, 0, &order)?;
    let rows = g.reshape(sorted, &[b, k, d])?;
    Ok(Conditioning {
        image: cond.image.clone(),
        ingredients: Some(Condition {
            rows,
            mask: ingr.mask.clone(),
        }),
    })
}

fn padded(m: &Mask, b: usize, j: usize) -> bool {
    let s = m.shape();
    let l = s[s.len() - 1];
    let bi = if s[0] == 1 { 0 } else { b };
    m.get(bi * l + j)
}

/// A greedily decoded token stream split into title and instructions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratedTokens {
    /// Everything decoded, starting with `<sor>`.
    pub tokens: Vec<usize>,
    pub title: Vec<usize>,
    /// Non-empty instruction segments after the title.
    pub instructions: Vec<Vec<usize>>,
    /// The token limit was reached before `<eor>`.
    pub truncated: bool,
    /// The title segment is empty.
    pub degenerate: bool,
}

impl GeneratedTokens {
    pub fn from_tokens(tokens: Vec<usize>) -> Self {
        let truncated = tokens.last() != Some(&EOR_ID);
        let mut segs = split_segments(&tokens).into_iter();
        let title = segs.next().unwrap_or_default();
        let instructions: Vec<Vec<usize>> = segs.filter(|s| !s.is_empty()).collect();
        GeneratedTokens {
            degenerate: title.is_empty(),
            tokens,
            title,
            instructions,
            truncated,
        }
    }
}

/// One line of the generation output file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedRecipe {
    pub id: String,
    pub title: String,
    pub ingredients: Vec<String>,
    pub instructions: Vec<String>,
    pub truncated: bool,
}

impl GeneratedRecipe {
    pub fn render(
        id: &str,
        generated: &GeneratedTokens,
        ingredients: &IngredientSet,
        words: &WordVocabulary,
        names: &IngredientVocabulary,
    ) -> Self {
        GeneratedRecipe {
            id: id.to_string(),
            title: words.detokenize(&generated.title),
            ingredients: ingredients.ids().iter().map(|&i| names.name(i).to_string()).collect(),
            instructions: generated.instructions.iter().map(|s| words.detokenize(s)).collect(),
            truncated: generated.truncated,
        }
    }
}

/// Mean instruction count and mean instruction length in words.
pub fn segment_stats(recipes: &[GeneratedTokens]) -> (f64, f64) {
    let segs: usize = recipes.iter().map(|r| r.instructions.len()).sum();
    let words: usize = recipes.iter().flat_map(|r| &r.instructions).map(Vec::len).sum();
    let per_recipe = if recipes.is_empty() { 0.0 } else { segs as f64 / recipes.len() as f64 };
    let per_segment = if segs == 0 { 0.0 } else { words as f64 / segs as f64 };
    (per_recipe, per_segment)
}

/// Ground-truth ingredient sets of `examples[idx]`.
pub(crate) fn gt_sets(examples: &[Example], idx: &[usize]) -> Vec<IngredientSet> {
    idx.iter()
        .map(|&i| IngredientSet::new(examples[i].ingredients.iter().copied()))
        .collect()
}

/// Teacher-forced loss of `examples[idx]` with ground-truth ingredients.
pub fn batch_nll<F: Scalar>(
    model: &RecipeModel,
    g: &mut Graph<F>,
    p: &Params<F>,
    examples: &[Example],
    idx: &[usize],
) -> Result<(Var, usize), Error> {
    let images = if model.ablation.uses_image() {
        Some(stack_images::<F>(examples, idx)?)
    } else {
        None
    };
    let sets = gt_sets(examples, idx);
    let cond = model.conditioning(g, p, images.as_ref(), Some(&sets))?;
    let tokens: Vec<Vec<usize>> = idx.iter().map(|&i| examples[i].tokens.clone()).collect();
    model.instruction_nll(g, p, &cond, &tokens)
}

/// Corpus mean negative log-likelihood per token, teacher-forced with
/// ground-truth ingredients.
pub fn mean_nll<F: Scalar>(model: &RecipeModel, p: &Params<F>, examples: &[Example]) -> Result<f64, Error> {
    if examples.is_empty() {
        return Err(Error::Validation("no examples to evaluate".into()));
    }
    let idx: Vec<usize> = (0..examples.len()).collect();
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in idx.chunks(EVAL_BATCH) {
        let mut g = Graph::new();
        let (loss, n) = batch_nll(model, &mut g, p, examples, chunk)?;
        total += g.value(loss).item().to_f64_lossy() * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

/// `exp` of [`mean_nll`].
pub fn perplexity<F: Scalar>(model: &RecipeModel, p: &Params<F>, examples: &[Example]) -> Result<f64, Error> {
    Ok(mean_nll(model, p, examples)?.exp())
}

/// Greedy generation for every example, conditioned on `sets` (one per
/// example) when the model uses ingredients.
pub fn generate_all<F: Scalar>(
    model: &RecipeModel,
    p: &Params<F>,
    examples: &[Example],
    sets: &[IngredientSet],
) -> Result<Vec<GeneratedTokens>, Error> {
    if sets.len() != examples.len() {
        return Err(Error::Validation(format!("{} ingredient sets for {} examples", sets.len(), examples.len())));
    }
    let idx: Vec<usize> = (0..examples.len()).collect();
    let mut out = Vec::with_capacity(examples.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let images = if model.ablation.uses_image() {
            Some(stack_images::<F>(examples, chunk)?)
        } else {
            None
        };
        let s: Vec<IngredientSet> = chunk.iter().map(|&i| sets[i].clone()).collect();
        out.extend(model.generate(p, images.as_ref(), Some(&s))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
