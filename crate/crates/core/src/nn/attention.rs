use rand::Rng;

use super::layers::{init_linear, linear};
use crate::tensor::{Graph, Mask, Params, Scalar, TensorError, Var};

/// Head layout of one attention layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionShape {
    pub n_heads: usize,
    pub head_dim: usize,
}

impl AttentionShape {
    pub fn width(&self) -> usize {
        self.n_heads * self.head_dim
    }
}

pub fn init_attention<F: Scalar, R: Rng>(p: &mut Params<F>, rng: &mut R, name: &str, d_model: usize, shape: AttentionShape) {
    let w = shape.width();
    for proj in ["q", "k", "v"] {
        init_linear(p, rng, &format!("{name}.{proj}"), d_model, w);
    }
    init_linear(p, rng, &format!("{name}.o"), w, d_model);
}

/// Keys and values split into heads: `[B, H, Tk, head_dim]` each.
#[derive(Clone, Copy, Debug)]
pub struct KeyValues {
    pub k: Var,
    pub v: Var,
}

impl KeyValues {
    /// Appends `other` along the key axis.
    pub fn append<F: Scalar>(&self, g: &mut Graph<F>, other: &KeyValues) -> Result<KeyValues, TensorError> {
        Ok(KeyValues {
            k: g.concat(&[self.k, other.k], 2)?,
            v: g.concat(&[self.v, other.v], 2)?,
        })
    }
}

fn split_heads<F: Scalar>(g: &mut Graph<F>, x: Var, shape: AttentionShape) -> Result<Var, TensorError> {
    let s = g.shape(x).to_vec();
    let x = g.reshape(x, &[s[0], s[1], shape.n_heads, shape.head_dim])?;
    g.permute(x, &[0, 2, 1, 3])
}

/// Projects `[B, Tk, d]` rows into per-head keys and values.
pub fn project_keys_values<F: Scalar>(
    g: &mut Graph<F>,
    p: &Params<F>,
    name: &str,
    keys_values: Var,
    shape: AttentionShape,
) -> Result<KeyValues, TensorError> {
    if g.shape(keys_values).len() != 3 {
        return Err(TensorError::Shape {
            op: "multi_head_attention",
            lhs: g.shape(keys_values).to_vec(),
            rhs: vec![],
        });
    }
    let k = linear(g, p, &format!("{name}.k"), keys_values)?;
    let v = linear(g, p, &format!("{name}.v"), keys_values)?;
    Ok(KeyValues {
        k: split_heads(g, k, shape)?,
        v: split_heads(g, v, shape)?,
    })
}

/// Attention of `[B, Tq, d]` queries over already projected keys and values.
pub fn attend<F: Scalar>(
    g: &mut Graph<F>,
    p: &Params<F>,
    name: &str,
    queries: Var,
    kv: &KeyValues,
    mask: Option<&Mask>,
    shape: AttentionShape,
) -> Result<Var, TensorError> {
    let sq = g.shape(queries).to_vec();
    let sk = g.shape(kv.k).to_vec();
    if sq.len() != 3 || sq[0] != sk[0] {
        return Err(TensorError::Shape {
            op: "multi_head_attention",
            lhs: sq,
            rhs: sk,
        });
    }
    let (b, tq) = (sq[0], sq[1]);
    let q = linear(g, p, &format!("{name}.q"), queries)?;
    let q = split_heads(g, q, shape)?;
    let scores = g.matmul_nt(q, kv.k)?;
    let scores = g.scale(scores, F::one() / F::from_usize(shape.head_dim).unwrap().sqrt());
    let scores = match mask {
        Some(m) => g.masked_fill(scores, m, F::neg_infinity())?,
        None => scores,
    };
    let weights = g.softmax(scores, 3)?;
    let ctx = g.matmul(weights, kv.v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[b, tq, shape.width()])?;
    linear(g, p, &format!("{name}.o"), ctx)
}

/// Scaled dot-product attention with `n_heads` heads.
///
/// `queries` is `[B, Tq, d]`, `keys_values` is `[B, Tk, d]`. `mask` marks
/// blocked (query, key) pairs and broadcasts to `[B, H, Tq, Tk]`; blocked
/// scores become −∞ before the softmax, so a query with every key blocked
/// is an error.
pub fn multi_head_attention<F: Scalar>(
    g: &mut Graph<F>,
    p: &Params<F>,
    name: &str,
    queries: Var,
    keys_values: Var,
    mask: Option<&Mask>,
    shape: AttentionShape,
) -> Result<Var, TensorError> {
    let sq = g.shape(queries);
    let sk = g.shape(keys_values);
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] {
        return Err(TensorError::Shape {
            op: "multi_head_attention",
            lhs: sq.to_vec(),
            rhs: sk.to_vec(),
        });
    }
    let kv = project_keys_values(g, p, name, keys_values, shape)?;
    attend(g, p, name, queries, &kv, mask, shape)
}
