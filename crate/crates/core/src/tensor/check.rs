use super::{Graph, Params, Scalar, Tensor, TensorError, Var};

/// Relative discrepancy used by [`grad_check`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares analytic gradients of a scalar function against central
/// differences `(f(x+eps) - f(x-eps)) / 2eps`, coordinate by coordinate.
///
/// `f` receives a fresh inference-mode graph and one variable per input.
/// Returns the maximum relative error over every input coordinate.
pub fn grad_check<F, Func>(f: Func, inputs: &[Tensor<F>], eps: f64) -> Result<f64, TensorError>
where
    F: Scalar,
    Func: Fn(&mut Graph<F>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |xs: &[Tensor<F>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item().to_f64_lossy())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<F>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + F::from_f64_lossy(eps);
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - F::from_f64_lossy(eps);
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[j].to_f64_lossy();
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

/// [`grad_check`] over every value of a parameter store: `f` binds the
/// parameters it needs from the store and returns a scalar.
pub fn grad_check_params<F, E, Func>(f: Func, params: &Params<F>, eps: f64) -> Result<f64, E>
where
    F: Scalar,
    E: From<TensorError>,
    Func: Fn(&mut Graph<F>, &Params<F>) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    let grads = g.backward(out)?.params(&g);

    let eval = |p: &Params<F>| -> Result<f64, E> {
        let mut g = Graph::new();
        let out = f(&mut g, p)?;
        Ok(g.value(out).item().to_f64_lossy())
    };
    let mut work = params.clone();
    let mut worst = 0.0f64;
    for name in params.names() {
        let Some(analytic) = grads.get(name) else { continue };
        for j in 0..analytic.len() {
            let orig = params.get(name).unwrap().data()[j];
            work.get_mut(name).unwrap().data_mut()[j] = orig + F::from_f64_lossy(eps);
            let plus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[j] = orig - F::from_f64_lossy(eps);
            let minus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic.data()[j].to_f64_lossy(), numeric));
        }
    }
    Ok(worst)
}
