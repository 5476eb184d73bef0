use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{attend, init_attention, multi_head_attention, project_keys_values, AttentionShape, KeyValues};
use super::config::DecoderConfig;
use super::layers::{init_layer_norm, init_linear, layer_norm, linear};
use crate::tensor::{Graph, Mask, Params, Scalar, TensorError, Var};
use crate::Error;

/// How a block's conditioning sublayer combines image features and
/// ingredient embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionStrategy {
    /// One attention over the image rows followed by the ingredient rows.
    Concatenated,
    /// Two attentions, one per modality, summed.
    Independent,
    /// Attend over the image, then the result attends over the ingredients.
    SequentialImageFirst,
    /// Attend over the ingredients, then the result attends over the image.
    SequentialIngredientsFirst,
    /// One attention over whichever single source is present.
    SingleCondition,
}

impl FusionStrategy {
    pub fn needs_image(self) -> bool {
        !matches!(self, FusionStrategy::SingleCondition)
    }

    pub fn needs_ingredients(self) -> bool {
        !matches!(self, FusionStrategy::SingleCondition | FusionStrategy::Concatenated)
    }
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Ok(match s {
            "concat" | "concatenated" => FusionStrategy::Concatenated,
            "independent" => FusionStrategy::Independent,
            "seq-img" | "sequential-image-first" => FusionStrategy::SequentialImageFirst,
            "seq-ingr" | "sequential-ingredients-first" => FusionStrategy::SequentialIngredientsFirst,
            "single" | "single-condition" => FusionStrategy::SingleCondition,
            other => return Err(Error::Config(format!("unknown fusion strategy `{other}`"))),
        })
    }
}

/// Conditioning rows `[B, L, d]` and an optional key-padding mask that
/// broadcasts to `[B, H, Tq, L]` (typically `[B, 1, 1, L]`).
#[derive(Clone, Debug)]
pub struct Condition {
    pub rows: Var,
    pub mask: Option<Mask>,
}

#[derive(Clone, Debug, Default)]
pub struct Conditioning {
    pub image: Option<Condition>,
    pub ingredients: Option<Condition>,
}

/// `[B, 1, 1, L]` mask blocking positions at or past each sample's length.
pub fn key_padding_mask(lengths: &[usize], l: usize) -> Mask {
    let data = lengths
        .iter()
        .flat_map(|&n| (0..l).map(move |j| j >= n))
        .collect();
    Mask::new(&[lengths.len(), 1, 1, l], data).expect("padding mask")
}

/// Everything a block needs besides parameters.
#[derive(Clone, Copy, Debug)]
pub struct BlockSettings {
    pub d_model: usize,
    pub attention: AttentionShape,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub eps: f64,
}

impl BlockSettings {
    pub fn new(d_model: usize, dec: &DecoderConfig, dropout: f64, eps: f64) -> Self {
        BlockSettings {
            d_model,
            attention: AttentionShape {
                n_heads: dec.n_heads,
                head_dim: dec.head_dim,
            },
            ffn_mult: dec.ffn_mult,
            dropout,
            eps,
        }
    }
}

pub fn init_block<F: Scalar, R: Rng>(p: &mut Params<F>, rng: &mut R, name: &str, s: &BlockSettings, strategy: FusionStrategy) {
    let d = s.d_model;
    init_layer_norm(p, &format!("{name}.norm_self"), d);
    init_attention(p, rng, &format!("{name}.self_attn"), d, s.attention);
    match strategy {
        FusionStrategy::Concatenated | FusionStrategy::SingleCondition => {
            init_layer_norm(p, &format!("{name}.norm_cond"), d);
            init_attention(p, rng, &format!("{name}.cond_attn"), d, s.attention);
        }
        FusionStrategy::Independent => {
            init_layer_norm(p, &format!("{name}.norm_cond"), d);
            init_attention(p, rng, &format!("{name}.img_attn"), d, s.attention);
            init_attention(p, rng, &format!("{name}.ingr_attn"), d, s.attention);
        }
        FusionStrategy::SequentialImageFirst | FusionStrategy::SequentialIngredientsFirst => {
            init_layer_norm(p, &format!("{name}.norm_cond"), d);
            init_layer_norm(p, &format!("{name}.norm_cond2"), d);
            init_attention(p, rng, &format!("{name}.img_attn"), d, s.attention);
            init_attention(p, rng, &format!("{name}.ingr_attn"), d, s.attention);
        }
    }
    init_layer_norm(p, &format!("{name}.norm_ff"), d);
    init_linear(p, rng, &format!("{name}.ff1"), d, d * s.ffn_mult);
    init_linear(p, rng, &format!("{name}.ff2"), d * s.ffn_mult, d);
}

/// Conditioning keys and values projected once per block, so repeated
/// single-step calls reuse them.
#[derive(Clone, Debug)]
pub struct PreparedConditioning {
    strategy: FusionStrategy,
    entries: Vec<(&'static str, KeyValues, Option<Mask>)>,
}

impl PreparedConditioning {
    fn get(&self, which: &str) -> &(&'static str, KeyValues, Option<Mask>) {
        self.entries.iter().find(|e| e.0 == which).expect("prepared attention")
    }
}

/// Validates `cond` against `strategy` and projects the conditioning rows
/// for every conditioning attention of block `name`.
pub fn prepare_conditioning<F: Scalar>(
    g: &mut Graph<F>,
    p: &Params<F>,
    name: &str,
    cond: &Conditioning,
    strategy: FusionStrategy,
    s: &BlockSettings,
) -> Result<PreparedConditioning, Error> {
    let missing = |what: &str| Error::Config(format!("{strategy:?} fusion needs {what} conditioning"));
    let mut project = |which: &'static str, c: &Condition| -> Result<(&'static str, KeyValues, Option<Mask>), Error> {
        let kv = project_keys_values(g, p, &format!("{name}.{which}"), c.rows, s.attention)?;
        Ok((which, kv, c.mask.clone()))
    };
    let entries = match strategy {
        FusionStrategy::SingleCondition => {
            let c = match (&cond.image, &cond.ingredients) {
                (Some(c), None) | (None, Some(c)) => c,
                _ => {
                    return Err(Error::Config(
                        "single-condition fusion needs exactly one conditioning source".into(),
                    ))
                }
            };
            vec![project("cond_attn", c)?]
        }
        FusionStrategy::Concatenated => {
            let c = concat_conditions(g, cond)?.ok_or_else(|| missing("image or ingredient"))?;
            let kv = project_keys_values(g, p, &format!("{name}.cond_attn"), c.rows, s.attention)?;
            vec![("cond_attn", kv, c.mask)]
        }
        _ => {
            let img = cond.image.as_ref().ok_or_else(|| missing("image"))?;
            let ingr = cond.ingredients.as_ref().ok_or_else(|| missing("ingredient"))?;
            vec![project("img_attn", img)?, project("ingr_attn", ingr)?]
        }
    };
    Ok(PreparedConditioning { strategy, entries })
}

enum SelfAttention<'a> {
    Full(Option<&'a Mask>),
    Cached(&'a mut Option<KeyValues>),
}

/// Pre-norm decoder block: causal self-attention, the conditioning
/// sublayer(s) of `strategy`, then a position-wise two-layer network, each
/// added back onto the residual stream.
#[allow(clippy::too_many_arguments)]
pub fn transformer_block<F: Scalar>(
    g: &mut Graph<F>,
    p: &Params<F>,
    name: &str,
    x: Var,
    cond: &Conditioning,
    self_mask: Option<&Mask>,
    strategy: FusionStrategy,
    s: &BlockSettings,
) -> Result<Var, Error> {
    let prepared = prepare_conditioning(g, p, name, cond, strategy, s)?;
    block_body(g, p, name, x, SelfAttention::Full(self_mask), &prepared, s)
}

/// One decoding step of [`transformer_block`] for `x` of shape `[B, 1, d]`.
/// `cache` holds the self-attention keys and values of earlier steps and is
/// extended with this step's.
pub fn transformer_block_step<F: Scalar>(
    g: &mut Graph<F>,
    p: &Params<F>,
    name: &str,
    x: Var,
    prepared: &PreparedConditioning,
    cache: &mut Option<KeyValues>,
    s: &BlockSettings,
) -> Result<Var, Error> {
    if g.shape(x).get(1) != Some(&1) {
        return Err(Error::Validation(format!("step input must be [B, 1, d], got {:?}", g.shape(x))));
    }
    block_body(g, p, name, x, SelfAttention::Cached(cache), prepared, s)
}

fn block_body<F: Scalar>(
    g: &mut Graph<F>,
    p: &Params<F>,
    name: &str,
    x: Var,
    self_attn: SelfAttention<'_>,
    prepared: &PreparedConditioning,
    s: &BlockSettings,
) -> Result<Var, Error> {
    let attn = s.attention;
    let sa = format!("{name}.self_attn");

    let h = layer_norm(g, p, &format!("{name}.norm_self"), x, s.eps)?;
    let a = match self_attn {
        SelfAttention::Full(mask) => multi_head_attention(g, p, &sa, h, h, mask, attn)?,
        SelfAttention::Cached(cache) => {
            let step = project_keys_values(g, p, &sa, h, attn)?;
            let kv = match cache.as_ref() {
                Some(prev) => prev.append(g, &step)?,
                None => step,
            };
            *cache = Some(kv);
            attend(g, p, &sa, h, &kv, None, attn)?
        }
    };
    let a = g.dropout(a, s.dropout);
    let mut x = g.add(x, a)?;

    let cross = |g: &mut Graph<F>, which: &str, q: Var| -> Result<Var, TensorError> {
        let (_, kv, mask) = prepared.get(which);
        attend(g, p, &format!("{name}.{which}"), q, kv, mask.as_ref(), attn)
    };
    match prepared.strategy {
        FusionStrategy::SingleCondition | FusionStrategy::Concatenated => {
            let h = layer_norm(g, p, &format!("{name}.norm_cond"), x, s.eps)?;
            let c = cross(g, "cond_attn", h)?;
            let c = g.dropout(c, s.dropout);
            x = g.add(x, c)?;
        }
        FusionStrategy::Independent => {
            let h = layer_norm(g, p, &format!("{name}.norm_cond"), x, s.eps)?;
            let a = cross(g, "img_attn", h)?;
            let b = cross(g, "ingr_attn", h)?;
            let c = g.add(a, b)?;
            let c = g.dropout(c, s.dropout);
            x = g.add(x, c)?;
        }
        FusionStrategy::SequentialImageFirst | FusionStrategy::SequentialIngredientsFirst => {
            let order = if prepared.strategy == FusionStrategy::SequentialImageFirst {
                ["img_attn", "ingr_attn"]
            } else {
                ["ingr_attn", "img_attn"]
            };
            for (which, norm) in order.into_iter().zip(["norm_cond", "norm_cond2"]) {
                let h = layer_norm(g, p, &format!("{name}.{norm}"), x, s.eps)?;
                let a = cross(g, which, h)?;
                let a = g.dropout(a, s.dropout);
                x = g.add(x, a)?;
            }
        }
    }

    let h = layer_norm(g, p, &format!("{name}.norm_ff"), x, s.eps)?;
    let f = linear(g, p, &format!("{name}.ff1"), h)?;
    let f = g.relu(f);
    let f = g.dropout(f, s.dropout);
    let f = linear(g, p, &format!("{name}.ff2"), f)?;
    let f = g.dropout(f, s.dropout);
    Ok(g.add(x, f)?)
}

/// Image rows followed by ingredient rows along the position axis, with the
/// padding masks joined the same way. `None` when neither source is given.
pub fn concat_conditions<F: Scalar>(g: &mut Graph<F>, cond: &Conditioning) -> Result<Option<Condition>, TensorError> {
    let parts: Vec<&Condition> = [&cond.image, &cond.ingredients]
        .into_iter()
        .flatten()
        .collect();
    match parts.as_slice() {
        [] => Ok(None),
        [one] => Ok(Some((*one).clone())),
        _ => {
            let rows = g.concat(&parts.iter().map(|c| c.rows).collect::<Vec<_>>(), 1)?;
            let b = g.shape(rows)[0];
            let lens: Vec<usize> = parts.iter().map(|c| g.shape(c.rows)[1]).collect();
            let mask = if parts.iter().all(|c| c.mask.is_none()) {
                None
            } else {
                let total: usize = lens.iter().sum();
                let mut data = Vec::with_capacity(b * total);
                for bi in 0..b {
                    for (c, &l) in parts.iter().zip(&lens) {
                        for j in 0..l {
                            data.push(c.mask.as_ref().is_some_and(|m| padding_at(m, bi, j)));
                        }
                    }
                }
                Some(Mask::new(&[b, 1, 1, total], data)?)
            };
            Ok(Some(Condition { rows, mask }))
        }
    }
}

/// Reads a `[B or 1, 1, 1, L]` key-padding mask.
fn padding_at(m: &Mask, b: usize, j: usize) -> bool {
    let s = m.shape();
    let l = s[s.len() - 1];
    let bi = if s[0] == 1 { 0 } else { b };
    m.get(bi * l + j)
}
