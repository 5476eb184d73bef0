//! Builds a small computation on the tape, runs the backward pass and
//! compares the result with central differences.

use inverse_cooking::tensor::{grad_check, Graph, Tensor, TensorError, Var};

fn loss(g: &mut Graph<f64>, x: &[Var]) -> Result<Var, TensorError> {
    let h = g.matmul(x[0], x[1])?;
    let h = g.add(h, x[2])?;
    let h = g.relu(h);
    let p = g.softmax(h, 1)?;
    let lp = g.log(p);
    Ok(g.mean(lp))
}

fn main() -> Result<(), TensorError> {
    let x = Tensor::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 1.5, 0.3, -0.7])?;
    let w = Tensor::from_f64(&[3, 4], &[0.1, 0.2, -0.3, 0.4, -0.5, 0.6, 0.7, -0.8, 0.9, -0.1, 0.2, 0.3])?;
    let b = Tensor::from_f64(&[4], &[0.05, -0.05, 0.1, 0.0])?;

    let mut g = Graph::new();
    let vars: Vec<Var> = [&x, &w, &b].iter().map(|t| g.variable((*t).clone())).collect();
    let out = loss(&mut g, &vars)?;
    let grads = g.backward(out)?;
    println!("loss = {:.6}", g.value(out).item());
    for (name, v) in ["x", "w", "b"].iter().zip(&vars) {
        println!("d loss / d {name} = {:?}", grads.get(*v).map(|t| t.data().to_vec()));
    }

    let err = grad_check(loss, &[x, w, b], 1e-6)?;
    println!("max relative error against central differences: {err:.2e}");
    Ok(())
}
