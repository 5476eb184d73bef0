use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::{Params, Scalar, Tensor};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: Params<F>,
    pub v: Params<F>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new() -> Self {
        AdamState {
            step: 0,
            m: Params::new(),
            v: Params::new(),
        }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
/// `lr` gives the learning rate for a parameter name. A non-finite
/// gradient aborts before any parameter changes.
pub fn adam_step<F: Scalar>(
    params: &mut Params<F>,
    grads: &BTreeMap<String, Tensor<F>>,
    state: &mut AdamState<F>,
    hyper: &AdamConfig,
    lr: impl Fn(&str) -> f64,
) -> Result<(), Error> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::Diverged(format!("non-finite gradient for `{name}` at step {}", state.step + 1)));
        }
        let p = params
            .get(name)
            .ok_or_else(|| Error::Validation(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::Validation(format!(
                "gradient shape {:?} for `{name}` of shape {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (name, g) in grads {
        if !state.m.contains(name) {
            state.m.insert(name.clone(), Tensor::zeros(g.shape()));
            state.v.insert(name.clone(), Tensor::zeros(g.shape()));
        }
        let step_size = lr(name);
        let m = state.m.get_mut(name).unwrap().data_mut();
        let v = state.v.get_mut(name).unwrap().data_mut();
        let p = params.get_mut(name).unwrap().data_mut();
        for i in 0..p.len() {
            let gi = g.data()[i].to_f64_lossy();
            let mi = b1 * m[i].to_f64_lossy() + (1.0 - b1) * gi;
            let vi = b2 * v[i].to_f64_lossy() + (1.0 - b2) * gi * gi;
            m[i] = F::from_f64_lossy(mi);
            v[i] = F::from_f64_lossy(vi);
            let update = step_size * (mi / c1) / ((vi / c2).sqrt() + hyper.eps);
            p[i] = F::from_f64_lossy(p[i].to_f64_lossy() - update);
        }
    }
    Ok(())
}
