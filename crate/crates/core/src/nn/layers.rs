use rand::Rng;

use crate::tensor::{Graph, Mask, Params, Scalar, Tensor, TensorError, Var};

/// `x @ w + b` over the last axis; parameters `{name}.w` and `{name}.b`.
pub fn linear<F: Scalar>(g: &mut Graph<F>, p: &Params<F>, name: &str, x: Var) -> Result<Var, TensorError> {
    let w = g.param(p, &format!("{name}.w"))?;
    let b = g.param(p, &format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub fn init_linear<F: Scalar, R: Rng>(p: &mut Params<F>, rng: &mut R, name: &str, fan_in: usize, fan_out: usize) {
    p.init_linear(rng, &format!("{name}.w"), fan_in, fan_out);
    p.init_const(&format!("{name}.b"), &[fan_out], 0.0);
}

pub fn layer_norm<F: Scalar>(g: &mut Graph<F>, p: &Params<F>, name: &str, x: Var, eps: f64) -> Result<Var, TensorError> {
    let gain = g.param(p, &format!("{name}.gain"))?;
    let bias = g.param(p, &format!("{name}.bias"))?;
    g.layer_norm(x, gain, bias, F::from_f64_lossy(eps))
}

pub fn init_layer_norm<F: Scalar>(p: &mut Params<F>, name: &str, d: usize) {
    p.init_const(&format!("{name}.gain"), &[d], 1.0);
    p.init_const(&format!("{name}.bias"), &[d], 0.0);
}

/// Blocks key positions `j > i`. Row `i` allows exactly `i + 1` entries.
pub fn causal_mask(t: usize) -> Mask {
    let data = (0..t * t).map(|k| k % t > k / t).collect();
    Mask::new(&[t, t], data).expect("square mask")
}

/// Sinusoidal position table: `sin(pos / 10000^(2i/d))` on even columns,
/// `cos` on odd ones.
pub fn positional_encoding<F: Scalar>(t: usize, d_model: usize) -> Tensor<F> {
    let mut data = Vec::with_capacity(t * d_model);
    for pos in 0..t {
        for j in 0..d_model {
            let pair = (j / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d_model as f64);
            let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            data.push(F::from_f64_lossy(v));
        }
    }
    Tensor::new(&[t, d_model], data).expect("t x d table")
}
