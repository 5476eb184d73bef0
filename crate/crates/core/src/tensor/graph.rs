use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::value::{axis_split, broadcast_index_map, broadcast_shape};
use super::{Mask, Params, Scalar, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Exp,
    Log,
    Sigmoid,
    Relu,
    Abs,
}

/// Geometry of a channels-last patch extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Binary { a: Var, b: Var, kind: Binary },
    Unary { a: Var, kind: Unary },
    Scale { a: Var, factor: F },
    AddScalar { a: Var },
    Softmax { a: Var, axis: usize },
    MaskedFill { a: Var, mask: Vec<bool> },
    MaxAxis { a: Var, axis: usize, argmax: Vec<usize> },
    SumAxis { a: Var, axis: usize, scale: F },
    SumAll { a: Var, scale: F },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { a: Var, axis: usize, start: usize },
    IndexSelect { a: Var, axis: usize, index: Vec<usize> },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Dropout { a: Var, keep: Vec<F> },
    CrossEntropy { logits: Var, target: Vec<F>, probs: Vec<F>, rows: usize },
    BceWithLogits { logits: Var, target: Vec<F> },
    Bce { probs: Var, target: Vec<F>, eps: F },
    Im2Col { a: Var, geom: ConvGeometry },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Tape of tensor operations recorded in topological order.
///
/// Nodes are appended as operations run, so the node order is a valid
/// topological order and [`Graph::backward`] walks it in reverse.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: BTreeMap<String, Var>,
    frozen: Vec<String>,
    training: bool,
    rng: ChaCha8Rng,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of all trainable parameters bound in `graph`, keyed by name.
    pub fn params(&self, graph: &Graph<F>) -> BTreeMap<String, Tensor<F>> {
        graph
            .params
            .iter()
            .filter(|(_, v)| graph.nodes[v.0].requires_grad)
            .map(|(name, v)| {
                let g = self
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(graph.nodes[v.0].value.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    /// Inference-mode graph (dropout is the identity).
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            frozen: Vec::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    /// Train-mode graph; dropout masks are drawn from a stream seeded by `seed`.
    pub fn training(seed: u64) -> Self {
        Graph {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Parameters whose name starts with `prefix` are bound as constants.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        self.frozen.push(prefix.to_string());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds the named parameter from `store`, once per graph.
    pub fn param(&mut self, store: &Params<F>, name: &str) -> Result<Var, TensorError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))?
            .clone();
        let trainable = !self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.push(t, Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    // ---------------------------------------------------------------------
    // Linear algebra

    /// `a @ b` where `a` is `[.., m, k]` and `b` is `[.., k, n]` (same batch
    /// dims) or a shared `[k, n]` matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ bᵀ` where `b` is `[.., n, k]` or a shared `[n, k]` matrix.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || TensorError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(err());
        }
        let shared = sb.len() == 2;
        if !shared && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(err());
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![F::zero(); batch * m * n];
        {
            let av = self.nodes[a.0].value.data();
            let bv = self.nodes[b.0].value.data();
            let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            if shared {
                F::gemm(
                    batch * m,
                    k,
                    n,
                    F::one(),
                    av,
                    k as isize,
                    1,
                    bv,
                    rsb,
                    csb,
                    F::zero(),
                    &mut out,
                    n as isize,
                    1,
                );
            } else {
                for i in 0..batch {
                    F::gemm(
                        m,
                        k,
                        n,
                        F::one(),
                        &av[i * m * k..(i + 1) * m * k],
                        k as isize,
                        1,
                        &bv[i * k * n..(i + 1) * k * n],
                        rsb,
                        csb,
                        F::zero(),
                        &mut out[i * m * n..(i + 1) * m * n],
                        n as isize,
                        1,
                    );
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::MatMul { a, b, trans_b },
            rg,
        ))
    }

    // ---------------------------------------------------------------------
    // Elementwise

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| TensorError::Shape {
            op: "broadcast",
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let f = |x: F, y: F| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let out: Vec<F> = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_index_map(&sa, &out_shape);
            let mb = broadcast_index_map(&sb, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(av[i], bv[j])).collect()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            Op::Binary { a, b, kind },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, Binary::Div)
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let out = self.nodes[a.0].value.map(|x| match kind {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(F::zero()),
            Unary::Abs => x.abs(),
        });
        let rg = self.rg(&[a]);
        self.push(out, Op::Unary { a, kind }, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let out = self.nodes[a.0].value.map(|x| x * factor);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale { a, factor }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: F) -> Var {
        let out = self.nodes[a.0].value.map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar { a }, rg)
    }

    // ---------------------------------------------------------------------
    // Normalizations and reductions

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<(), TensorError> {
        let rank = self.shape(a).len();
        if axis >= rank {
            return Err(TensorError::Axis { op, axis, rank });
        }
        Ok(())
    }

    /// Softmax along `axis`, stabilized by max subtraction. A slice that is
    /// entirely −∞ has no distribution and is rejected.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("softmax", a, axis)?;
        let x = &self.nodes[a.0].value;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let xv = x.data();
        let mut out = vec![F::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = F::neg_infinity();
                for j in 0..len {
                    max = max.max(xv[base + j * inner]);
                }
                if max == F::neg_infinity() {
                    return Err(TensorError::AllMasked { op: "softmax" });
                }
                let mut sum = F::zero();
                for j in 0..len {
                    let e = (xv[base + j * inner] - max).exp();
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let shape = x.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { a, axis }, rg))
    }

    /// Replaces positions where `mask` is set by `value`; the mask broadcasts
    /// to the shape of `a`. Gradient is zero at filled positions.
    pub fn masked_fill(&mut self, a: Var, mask: &Mask, value: F) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let out_shape = broadcast_shape(&sa, mask.shape());
        if out_shape.as_deref() != Some(&sa[..]) {
            return Err(TensorError::Shape {
                op: "masked_fill",
                lhs: sa,
                rhs: mask.shape().to_vec(),
            });
        }
        let map = broadcast_index_map(mask.shape(), &sa);
        let expanded: Vec<bool> = map.iter().map(|&j| mask.get(j)).collect();
        let out: Vec<F> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(&expanded)
            .map(|(&x, &m)| if m { value } else { x })
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(sa, out),
            Op::MaskedFill { a, mask: expanded },
            rg,
        ))
    }

    /// Max along `axis`; the axis is removed from the output shape. Returns
    /// the argmax (lowest index on ties) per output element.
    pub fn max_over_axis(&mut self, a: Var, axis: usize) -> Result<(Var, Vec<usize>), TensorError> {
        self.check_axis("max_over_axis", a, axis)?;
        let x = &self.nodes[a.0].value;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        if len == 0 {
            return Err(TensorError::Axis {
                op: "max_over_axis",
                axis,
                rank: x.rank(),
            });
        }
        let xv = x.data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = 0;
                let mut best_v = xv[base];
                for j in 1..len {
                    let v = xv[base + j * inner];
                    if v > best_v {
                        best = j;
                        best_v = v;
                    }
                }
                out.push(best_v);
                argmax.push(best);
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(&[a]);
        let v = self.push(
            Tensor::from_parts(shape, out),
            Op::MaxAxis {
                a,
                axis,
                argmax: argmax.clone(),
            },
            rg,
        );
        Ok((v, argmax))
    }

    fn sum_axis_scaled(&mut self, a: Var, axis: usize, scale: F) -> Result<Var, TensorError> {
        self.check_axis("sum_axis", a, axis)?;
        let x = &self.nodes[a.0].value;
        let (outer, len, inner) = axis_split(x.shape(), axis);
        let xv = x.data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &xv[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (dst, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        if scale != F::one() {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::SumAxis { a, axis, scale },
            rg,
        ))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.sum_axis_scaled(a, axis, F::one())
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("mean_axis", a, axis)?;
        let len = self.shape(a)[axis];
        self.sum_axis_scaled(a, axis, F::one() / F::from_usize(len.max(1)).unwrap())
    }

    fn sum_all_scaled(&mut self, a: Var, scale: F) -> Var {
        let s: F = self.nodes[a.0].value.data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s * scale), Op::SumAll { a, scale }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.sum_all_scaled(a, F::one())
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1);
        self.sum_all_scaled(a, F::one() / F::from_usize(n).unwrap())
    }

    /// Layer normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or(TensorError::Axis {
            op: "layer_norm",
            axis: 0,
            rank: 0,
        })?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: sx.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.nodes[x.0].value.data();
        let g = self.nodes[gain.0].value.data();
        let b = self.nodes[bias.0].value.data();
        let rows = xv.len() / d.max(1);
        let dn = F::from_usize(d).unwrap();
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(sx, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---------------------------------------------------------------------
    // Shape manipulation

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Validation(
            "concat of zero tensors".to_string(),
        ))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let same = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !same {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        self.check_axis("narrow", a, axis)?;
        let sa = self.shape(a).to_vec();
        if start + len > sa[axis] {
            return Err(TensorError::Validation(format!(
                "narrow [{start}, {}) out of range for axis {axis} of {sa:?}",
                start + len
            )));
        }
        let (outer, full, inner) = axis_split(&sa, axis);
        let xv = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&xv[s..s + len * inner]);
        }
        let mut shape = sa;
        shape[axis] = len;
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Narrow { a, axis, start },
            rg,
        ))
    }

    /// Gathers entries along `axis`; indices may repeat (gradients add up).
    pub fn index_select(&mut self, a: Var, axis: usize, index: &[usize]) -> Result<Var, TensorError> {
        self.check_axis("index_select", a, axis)?;
        let sa = self.shape(a).to_vec();
        if let Some(&bad) = index.iter().find(|&&i| i >= sa[axis]) {
            return Err(TensorError::Validation(format!(
                "index {bad} out of range for axis {axis} of {sa:?}"
            )));
        }
        let (outer, full, inner) = axis_split(&sa, axis);
        let xv = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index {
                let s = (o * full + i) * inner;
                out.extend_from_slice(&xv[s..s + inner]);
            }
        }
        let mut shape = sa;
        shape[axis] = index.len();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::IndexSelect {
                a,
                axis,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Row lookup into a `[rows, d]` table; output is `ids.len() x d`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        self.index_select(table, 0, ids)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.nodes[a.0].value.clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len() || perm.iter().any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Validation(format!(
                "invalid permutation {perm:?} for shape {sa:?}"
            )));
        }
        let (shape, out) = permute_data(&sa, self.nodes[a.0].value.data(), perm);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(TensorError::Axis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Inverted dropout in train mode, identity otherwise.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return a;
        }
        let scale = F::from_f64_lossy(1.0 / (1.0 - p));
        let n = self.nodes[a.0].value.len();
        let keep: Vec<F> = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < p {
                    F::zero()
                } else {
                    scale
                }
            })
            .collect();
        let x = &self.nodes[a.0].value;
        let out: Vec<F> = x.data().iter().zip(&keep).map(|(&v, &k)| v * k).collect();
        let shape = x.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::from_parts(shape, out), Op::Dropout { a, keep }, rg)
    }

    /// Channels-last patch extraction: `[B, H, W, C]` to `[B, Ho*Wo, k*k*C]`
    /// with zero padding.
    pub fn im2col(&mut self, a: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 4 || kernel == 0 || stride == 0 || sa[1] + 2 * padding < kernel || sa[2] + 2 * padding < kernel {
            return Err(TensorError::Validation(format!(
                "im2col expects [B,H,W,C] at least kernel-sized, got {sa:?} (kernel {kernel})"
            )));
        }
        let geom = ConvGeometry {
            height: sa[1],
            width: sa[2],
            channels: sa[3],
            kernel,
            stride,
            padding,
        };
        let (ho, wo, pl) = (geom.out_height(), geom.out_width(), geom.patch_len());
        let xv = self.nodes[a.0].value.data();
        let mut out = vec![F::zero(); sa[0] * ho * wo * pl];
        for b in 0..sa[0] {
            for_each_patch_entry(&geom, |oy, ox, slot, src| {
                let dst = ((b * ho + oy) * wo + ox) * pl + slot;
                out[dst] = xv[b * geom.height * geom.width * geom.channels + src];
            });
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(vec![sa[0], ho * wo, pl], out),
            Op::Im2Col { a, geom },
            rg,
        ))
    }

    // ---------------------------------------------------------------------
    // Losses

    /// Mean over rows of `-Σ target' · log softmax(logits)` along the last
    /// axis, with `target' = (1-ε)·target + ε/V`.
    pub fn cross_entropy(&mut self, logits: Var, target: &Tensor<F>, smoothing: f64) -> Result<Var, TensorError> {
        let sl = self.shape(logits).to_vec();
        if sl != target.shape() || sl.is_empty() {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                lhs: sl,
                rhs: target.shape().to_vec(),
            });
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(TensorError::Validation(format!(
                "label smoothing {smoothing} outside [0, 1)"
            )));
        }
        let v = *sl.last().unwrap();
        let rows = target.len() / v.max(1);
        let tol = F::from_f64_lossy(1e-6);
        for r in 0..rows {
            let row = &target.data()[r * v..(r + 1) * v];
            let s: F = row.iter().copied().sum();
            if (s - F::one()).abs() > tol || row.iter().any(|&t| t < F::zero()) {
                return Err(TensorError::Validation(format!(
                    "target row {r} is not a distribution (sum {s})"
                )));
            }
        }
        let eps = F::from_f64_lossy(smoothing);
        let uniform = eps / F::from_usize(v).unwrap();
        let tgt: Vec<F> = target
            .data()
            .iter()
            .map(|&t| t * (F::one() - eps) + uniform)
            .collect();
        let lv = self.nodes[logits.0].value.data();
        let mut probs = vec![F::zero(); lv.len()];
        let mut total = F::zero();
        for r in 0..rows {
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            if max == F::neg_infinity() {
                return Err(TensorError::AllMasked { op: "cross_entropy" });
            }
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<F>().ln() + max;
            for j in 0..v {
                let t = tgt[r * v + j];
                probs[r * v + j] = (row[j] - lse).exp();
                if t > F::zero() {
                    total -= t * (row[j] - lse);
                }
            }
        }
        let loss = total / F::from_usize(rows.max(1)).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target: tgt,
                probs,
                rows,
            },
            rg,
        ))
    }

    /// Mean elementwise binary cross-entropy on logits, targets smoothed
    /// as `t(1-ε) + ε/2`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<F>, smoothing: f64) -> Result<Var, TensorError> {
        let tgt = self.bce_targets("bce_with_logits", logits, target, smoothing)?;
        let lv = self.nodes[logits.0].value.data();
        let mut total = F::zero();
        for (&z, &t) in lv.iter().zip(&tgt) {
            total += z.max(F::zero()) - z * t + (F::one() + (-z.abs()).exp()).ln();
        }
        let loss = total / F::from_usize(lv.len().max(1)).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits { logits, target: tgt },
            rg,
        ))
    }

    /// Binary cross-entropy on probabilities (clamped to `[eps, 1-eps]`).
    pub fn bce(&mut self, probs: Var, target: &Tensor<F>, smoothing: f64) -> Result<Var, TensorError> {
        let tgt = self.bce_targets("bce", probs, target, smoothing)?;
        let eps = if std::mem::size_of::<F>() == 4 {
            F::from_f64_lossy(1e-7)
        } else {
            F::from_f64_lossy(1e-12)
        };
        let pv = self.nodes[probs.0].value.data();
        let mut total = F::zero();
        for (&p, &t) in pv.iter().zip(&tgt) {
            let pc = p.max(eps).min(F::one() - eps);
            if t > F::zero() {
                total -= t * pc.ln();
            }
            if t < F::one() {
                total -= (F::one() - t) * (F::one() - pc).ln();
            }
        }
        let loss = total / F::from_usize(pv.len().max(1)).unwrap();
        let rg = self.rg(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                probs,
                target: tgt,
                eps,
            },
            rg,
        ))
    }

    fn bce_targets(&self, op: &'static str, x: Var, target: &Tensor<F>, smoothing: f64) -> Result<Vec<F>, TensorError> {
        if self.shape(x) != target.shape() {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(TensorError::Validation(format!(
                "label smoothing {smoothing} outside [0, 1)"
            )));
        }
        if let Some(bad) = target
            .data()
            .iter()
            .find(|&&t| !(t >= F::zero() && t <= F::one()))
        {
            return Err(TensorError::Validation(format!(
                "{op} target {bad} outside [0, 1]"
            )));
        }
        let eps = F::from_f64_lossy(smoothing);
        let half = F::from_f64_lossy(0.5 * smoothing);
        Ok(target
            .data()
            .iter()
            .map(|&t| t * (F::one() - eps) + half)
            .collect())
    }

    // ---------------------------------------------------------------------
    // Backward

    /// Reverse-mode sweep from a scalar `loss`. Every node reachable from the
    /// loss that requires a gradient receives its accumulated gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, TensorError> {
        let ls = self.shape(loss);
        if self.nodes[loss.0].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(ls.to_vec(), vec![F::one()]));
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.backward_node(i, &gout, &mut grads);
            }
            grads[i] = Some(gout);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, gout: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let g = gout.data();
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => self.backward_matmul(*a, *b, *trans_b, g, grads),
            Op::Binary { a, b, kind } => {
                let out_shape = node.value.shape();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let same = sa == sb;
                let ma = if same { Vec::new() } else { broadcast_index_map(sa, out_shape) };
                let mb = if same { Vec::new() } else { broadcast_index_map(sb, out_shape) };
                let ia = |k: usize| if same { k } else { ma[k] };
                let ib = |k: usize| if same { k } else { mb[k] };
                if self.requires_grad(*a) {
                    let buf = grad_buf(grads, *a, sa);
                    for k in 0..g.len() {
                        let d = match kind {
                            Binary::Add | Binary::Sub => g[k],
                            Binary::Mul => g[k] * bv[ib(k)],
                            Binary::Div => g[k] / bv[ib(k)],
                        };
                        buf[ia(k)] += d;
                    }
                }
                if self.requires_grad(*b) {
                    let buf = grad_buf(grads, *b, sb);
                    for k in 0..g.len() {
                        let d = match kind {
                            Binary::Add => g[k],
                            Binary::Sub => -g[k],
                            Binary::Mul => g[k] * av[ia(k)],
                            Binary::Div => {
                                let bb = bv[ib(k)];
                                -g[k] * av[ia(k)] / (bb * bb)
                            }
                        };
                        buf[ib(k)] += d;
                    }
                }
            }
            Op::Unary { a, kind } => {
                let x = self.value(*a).data();
                let buf = grad_buf(grads, *a, self.shape(*a));
                for k in 0..g.len() {
                    let d = match kind {
                        Unary::Exp => g[k] * y[k],
                        Unary::Log => g[k] / x[k],
                        Unary::Sigmoid => g[k] * y[k] * (F::one() - y[k]),
                        Unary::Relu => {
                            if x[k] > F::zero() {
                                g[k]
                            } else {
                                F::zero()
                            }
                        }
                        Unary::Abs => {
                            if x[k] > F::zero() {
                                g[k]
                            } else if x[k] < F::zero() {
                                -g[k]
                            } else {
                                F::zero()
                            }
                        }
                    };
                    buf[k] += d;
                }
            }
            Op::Scale { a, factor } => {
                let buf = grad_buf(grads, *a, self.shape(*a));
                for k in 0..g.len() {
                    buf[k] += g[k] * *factor;
                }
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                let buf = grad_buf(grads, *a, self.shape(*a));
                for k in 0..g.len() {
                    buf[k] += g[k];
                }
            }
            Op::Softmax { a, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let buf = grad_buf(grads, *a, self.shape(*a));
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * len * inner + ii;
                        let mut dot = F::zero();
                        for j in 0..len {
                            let k = base + j * inner;
                            dot += g[k] * y[k];
                        }
                        for j in 0..len {
                            let k = base + j * inner;
                            buf[k] += y[k] * (g[k] - dot);
                        }
                    }
                }
            }
            Op::MaskedFill { a, mask } => {
                let buf = grad_buf(grads, *a, self.shape(*a));
                for k in 0..g.len() {
                    if !mask[k] {
                        buf[k] += g[k];
                    }
                }
            }
            Op::MaxAxis { a, axis, argmax } => {
                let (_, len, inner) = axis_split(self.shape(*a), *axis);
                let buf = grad_buf(grads, *a, self.shape(*a));
                for (k, &j) in argmax.iter().enumerate() {
                    let (o, ii) = (k / inner, k % inner);
                    buf[(o * len + j) * inner + ii] += g[k];
                }
            }
            Op::SumAxis { a, axis, scale } => {
                let (outer, len, inner) = axis_split(self.shape(*a), *axis);
                let buf = grad_buf(grads, *a, self.shape(*a));
                for o in 0..outer {
                    for j in 0..len {
                        let dst = &mut buf[(o * len + j) * inner..(o * len + j + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                            *d += s * *scale;
                        }
                    }
                }
            }
            Op::SumAll { a, scale } => {
                let buf = grad_buf(grads, *a, self.shape(*a));
                let gs = g[0] * *scale;
                buf.iter_mut().for_each(|v| *v += gs);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                let rows = g.len() / d.max(1);
                let dn = F::from_usize(d).unwrap();
                if self.requires_grad(*gain) {
                    let buf = grad_buf(grads, *gain, &[d]);
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if self.requires_grad(*bias) {
                    let buf = grad_buf(grads, *bias, &[d]);
                    for r in 0..rows {
                        for j in 0..d {
                            buf[j] += g[r * d + j];
                        }
                    }
                }
                if self.requires_grad(*x) {
                    let buf = grad_buf(grads, *x, self.shape(*x));
                    for r in 0..rows {
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            m1 += dh;
                            m2 += dh * xhat[r * d + j];
                        }
                        m1 /= dn;
                        m2 /= dn;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            buf[r * d + j] += rstd[r] * (dh - m1 - xhat[r * d + j] * m2);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.shape(*p)[*axis];
                    if self.requires_grad(*p) {
                        let buf = grad_buf(grads, *p, self.shape(*p));
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (d, &s) in buf[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { a, axis, start } => {
                let (outer, full, inner) = axis_split(self.shape(*a), *axis);
                let len = node.value.shape()[*axis];
                let buf = grad_buf(grads, *a, self.shape(*a));
                for o in 0..outer {
                    let dst = &mut buf[(o * full + start) * inner..(o * full + start + len) * inner];
                    for (d, &s) in dst.iter_mut().zip(&g[o * len * inner..(o + 1) * len * inner]) {
                        *d += s;
                    }
                }
            }
            Op::IndexSelect { a, axis, index } => {
                let (outer, full, inner) = axis_split(self.shape(*a), *axis);
                let buf = grad_buf(grads, *a, self.shape(*a));
                for o in 0..outer {
                    for (n, &src) in index.iter().enumerate() {
                        let gs = &g[(o * index.len() + n) * inner..(o * index.len() + n + 1) * inner];
                        let dst = &mut buf[(o * full + src) * inner..(o * full + src + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(gs) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, back) = permute_data(node.value.shape(), g, &inv);
                let buf = grad_buf(grads, *a, self.shape(*a));
                for (d, s) in buf.iter_mut().zip(back) {
                    *d += s;
                }
            }
            Op::Dropout { a, keep } => {
                let buf = grad_buf(grads, *a, self.shape(*a));
                for k in 0..g.len() {
                    buf[k] += g[k] * keep[k];
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
                rows,
            } => {
                let scale = g[0] / F::from_usize((*rows).max(1)).unwrap();
                let buf = grad_buf(grads, *logits, self.shape(*logits));
                let v = probs.len() / (*rows).max(1);
                for r in 0..*rows {
                    let mass: F = target[r * v..(r + 1) * v].iter().copied().sum();
                    for j in 0..v {
                        let k = r * v + j;
                        buf[k] += scale * (probs[k] * mass - target[k]);
                    }
                }
            }
            Op::BceWithLogits { logits, target } => {
                let scale = g[0] / F::from_usize(target.len().max(1)).unwrap();
                let z = self.value(*logits).data();
                let buf = grad_buf(grads, *logits, self.shape(*logits));
                for k in 0..target.len() {
                    buf[k] += scale * (sigmoid(z[k]) - target[k]);
                }
            }
            Op::Bce { probs, target, eps } => {
                let scale = g[0] / F::from_usize(target.len().max(1)).unwrap();
                let p = self.value(*probs).data();
                let buf = grad_buf(grads, *probs, self.shape(*probs));
                for k in 0..target.len() {
                    if p[k] < *eps || p[k] > F::one() - *eps {
                        continue;
                    }
                    buf[k] += scale * (p[k] - target[k]) / (p[k] * (F::one() - p[k]));
                }
            }
            Op::Im2Col { a, geom } => {
                let batch = self.shape(*a)[0];
                let (ho, wo, pl) = (geom.out_height(), geom.out_width(), geom.patch_len());
                let img = geom.height * geom.width * geom.channels;
                let buf = grad_buf(grads, *a, self.shape(*a));
                for b in 0..batch {
                    for_each_patch_entry(geom, |oy, ox, slot, src| {
                        buf[b * img + src] += g[((b * ho + oy) * wo + ox) * pl + slot];
                    });
                }
            }
        }
    }

    fn backward_matmul(&self, a: Var, b: Var, trans_b: bool, g: &[F], grads: &mut [Option<Tensor<F>>]) {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = if trans_b { sb[sb.len() - 2] } else { sb[sb.len() - 1] };
        let shared = sb.len() == 2;
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let (ki, ni) = (k as isize, n as isize);
        if self.requires_grad(a) {
            // dA = dC · op(B)ᵀ
            let (rs, cs) = if trans_b { (ki, 1) } else { (1, ni) };
            let buf = grad_buf(grads, a, &sa);
            if shared {
                F::gemm(batch * m, n, k, F::one(), g, ni, 1, bv, rs, cs, F::one(), buf, ki, 1);
            } else {
                for i in 0..batch {
                    F::gemm(
                        m,
                        n,
                        k,
                        F::one(),
                        &g[i * m * n..(i + 1) * m * n],
                        ni,
                        1,
                        &bv[i * k * n..(i + 1) * k * n],
                        rs,
                        cs,
                        F::one(),
                        &mut buf[i * m * k..(i + 1) * m * k],
                        ki,
                        1,
                    );
                }
            }
        }
        if self.requires_grad(b) {
            let buf = grad_buf(grads, b, &sb);
            let rows = if shared { batch * m } else { m };
            let count = if shared { 1 } else { batch };
            for i in 0..count {
                let a_i = &av[i * rows * k..(i + 1) * rows * k];
                let g_i = &g[i * rows * n..(i + 1) * rows * n];
                let b_i = &mut buf[i * k * n..(i + 1) * k * n];
                if trans_b {
                    // dB[n,k] = dCᵀ · A
                    F::gemm(n, rows, k, F::one(), g_i, 1, ni, a_i, ki, 1, F::one(), b_i, ki, 1);
                } else {
                    // dB[k,n] = Aᵀ · dC
                    F::gemm(k, rows, n, F::one(), a_i, 1, ki, g_i, ni, 1, F::one(), b_i, ni, 1);
                }
            }
        }
    }

    /// Random draws for callers that need the graph's seeded stream.
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

fn grad_buf<'a, F: Scalar>(grads: &'a mut [Option<Tensor<F>>], v: Var, shape: &[usize]) -> &'a mut [F] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn permute_data<F: Scalar>(shape: &[usize], data: &[F], perm: &[usize]) -> (Vec<usize>, Vec<F>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            counter[ax] += 1;
            offset += strides[ax];
            if counter[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
    (out_shape, out)
}

/// Visits every (output y, output x, patch slot, source offset) quadruple of
/// a patch extraction, skipping padding.
fn for_each_patch_entry(geom: &ConvGeometry, mut f: impl FnMut(usize, usize, usize, usize)) {
    let (ho, wo) = (geom.out_height(), geom.out_width());
    for oy in 0..ho {
        for ox in 0..wo {
            for ky in 0..geom.kernel {
                let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
                if iy < 0 || iy >= geom.height as isize {
                    continue;
                }
                for kx in 0..geom.kernel {
                    let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
                    if ix < 0 || ix >= geom.width as isize {
                        continue;
                    }
                    let src = ((iy as usize) * geom.width + ix as usize) * geom.channels;
                    let slot = (ky * geom.kernel + kx) * geom.channels;
                    for c in 0..geom.channels {
                        f(oy, ox, slot + c, src + c);
                    }
                }
            }
        }
    }
}
