use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..5)).collect()
}

fn eval(f: impl FnOnce(&mut Graph<f64>) -> Result<Var, TensorError>) -> Tensor<f64> {
    let mut g = Graph::new();
    let v = f(&mut g).unwrap();
    g.value(v).clone()
}

/// Weighted sum with fixed pseudo-random weights, so a non-scalar output
/// becomes a scalar whose gradient exercises every coordinate.
fn probe(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(&mut rng, g.shape(x));
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

const TOL: f64 = 1e-5;

#[test]
fn matmul_examples() {
    let a = t(&[2, 2], &[1., 2., 3., 4.]);
    let b = t(&[2, 2], &[5., 6., 7., 8.]);
    let c = eval(|g| {
        let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
        g.matmul(a, b)
    });
    assert_eq!(c.to_f64_vec(), vec![19., 22., 43., 50.]);

    let i = eval(|g| {
        let (e, b) = (g.constant(Tensor::eye(2)), g.constant(b.clone()));
        g.matmul(e, b)
    });
    assert_eq!(i, b);

    let z = eval(|g| {
        let (z, b3) = (g.constant(Tensor::zeros(&[2, 3])), g.constant(Tensor::ones(&[3, 4])));
        g.matmul(z, b3)
    });
    assert_eq!(z, Tensor::zeros(&[2, 4]));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
    assert!(matches!(err, TensorError::Shape { .. }));
}

#[test]
fn softmax_examples() {
    let s = eval(|g| {
        let x = g.constant(t(&[3], &[2., 2., 2.]));
        g.softmax(x, 0)
    });
    for v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let s = eval(|g| {
        let x = g.constant(t(&[2], &[0., 2f64.ln()]));
        g.softmax(x, 0)
    });
    assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-15);

    let s = eval(|g| {
        let x = g.constant(t(&[4], &[0.3, 0.1, 5.0, -1.0]));
        let m = Mask::new(&[4], vec![false, false, true, false]).unwrap();
        let x = g.masked_fill(x, &m, f64::NEG_INFINITY)?;
        g.softmax(x, 0)
    });
    assert_eq!(s.data()[2], 0.0);
    assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn softmax_all_neg_inf_is_an_error() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2, 3], &[0., 1., 2., 3., 4., 5.]));
    let m = Mask::new(&[1, 3], vec![true, true, true]).unwrap();
    let x = g.masked_fill(x, &m, f64::NEG_INFINITY).unwrap();
    assert!(matches!(
        g.softmax(x, 1),
        Err(TensorError::AllMasked { .. })
    ));
}

#[test]
fn masked_fill_empty_mask_is_identity_and_bad_mask_errors() {
    let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
    let y = eval(|g| {
        let v = g.constant(x.clone());
        g.masked_fill(v, &Mask::none(&[2, 3]), -1.0)
    });
    assert_eq!(y, x);

    let mut g = Graph::<f64>::new();
    let v = g.constant(x);
    assert!(matches!(
        g.masked_fill(v, &Mask::none(&[4]), 0.0),
        Err(TensorError::Shape { .. })
    ));
}

#[test]
fn max_over_axis_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t(&[2, 2], &[1., 5., 3., 2.]));
    let (m, arg) = g.max_over_axis(x, 0).unwrap();
    assert_eq!(g.value(m).to_f64_vec(), vec![3., 5.]);
    assert_eq!(arg, vec![1, 0]);

    let x1 = g.constant(t(&[1, 3], &[1., -2., 3.]));
    let (m1, _) = g.max_over_axis(x1, 0).unwrap();
    assert_eq!(g.value(m1).to_f64_vec(), vec![1., -2., 3.]);
}

#[test]
fn max_ties_route_gradient_to_lowest_index() {
    let mut g = Graph::<f64>::new();
    let x = g.variable(t(&[3], &[2., 2., 1.]));
    let (m, arg) = g.max_over_axis(x, 0).unwrap();
    assert_eq!(arg, vec![0]);
    let grads = g.backward(m).unwrap();
    assert_eq!(grads.get(x).unwrap().to_f64_vec(), vec![1., 0., 0.]);
}

#[test]
fn layer_norm_examples() {
    let y = eval(|g| {
        let x = g.constant(t(&[2], &[1., 3.]));
        let gain = g.constant(Tensor::ones(&[2]));
        let bias = g.constant(Tensor::zeros(&[2]));
        g.layer_norm(x, gain, bias, 1e-5)
    });
    assert!((y.data()[0] + 1.0).abs() < 1e-5);
    assert!((y.data()[1] - 1.0).abs() < 1e-5);

    let y = eval(|g| {
        let x = g.constant(t(&[3], &[4., 4., 4.]));
        let gain = g.constant(t(&[3], &[2., 3., 4.]));
        let bias = g.constant(t(&[3], &[0.5, -1., 7.]));
        g.layer_norm(x, gain, bias, 1e-5)
    });
    assert_eq!(y.to_f64_vec(), vec![0.5, -1., 7.]);
}

#[test]
fn cross_entropy_examples() {
    let ce = |logits: Tensor<f64>, target: Tensor<f64>, eps: f64| {
        let mut g = Graph::new();
        let l = g.constant(logits);
        let v = g.cross_entropy(l, &target, eps)?;
        Ok::<f64, TensorError>(g.value(v).item())
    };
    let two = ce(t(&[1, 2], &[0., 0.]), t(&[1, 2], &[1., 0.]), 0.0).unwrap();
    assert!((two - 2f64.ln()).abs() < 1e-15);

    let uni = ce(Tensor::zeros(&[3, 7]), {
        let mut tg = Tensor::zeros(&[3, 7]);
        for r in 0..3 {
            tg.data_mut()[r * 7 + r] = 1.0;
        }
        tg
    }, 0.0)
    .unwrap();
    assert!((uni - 7f64.ln()).abs() < 1e-12);

    let sharp = ce(t(&[1, 3], &[100., 0., 0.]), t(&[1, 3], &[1., 0., 0.]), 0.0).unwrap();
    assert!(sharp < 1e-40);

    assert!(matches!(
        ce(t(&[1, 2], &[0., 0.]), t(&[1, 2], &[0.7, 0.7]), 0.0),
        Err(TensorError::Validation(_))
    ));
}

#[test]
fn bce_with_logits_examples() {
    let bce = |z: f64, target: f64, eps: f64| {
        let mut g = Graph::new();
        let l = g.constant(t(&[1], &[z]));
        let v = g.bce_with_logits(l, &t(&[1], &[target]), eps)?;
        Ok::<f64, TensorError>(g.value(v).item())
    };
    assert!((bce(0.0, 0.5, 0.0).unwrap() - 2f64.ln()).abs() < 1e-15);
    assert!(bce(60.0, 1.0, 0.0).unwrap() < 1e-25);
    let smoothed = -(0.95 * 0.5f64.ln() + 0.05 * 0.5f64.ln());
    assert!((bce(0.0, 1.0, 0.1).unwrap() - smoothed).abs() < 1e-15);
    assert!((smoothed - 2f64.ln()).abs() < 1e-15);
    assert!(matches!(bce(0.0, 1.5, 0.0), Err(TensorError::Validation(_))));
}

#[test]
fn backward_examples() {
    let mut g = Graph::<f64>::new();
    let p = g.variable(t(&[3], &[0.3, -2., 5.]));
    let s = g.sum(p);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(p).unwrap().to_f64_vec(), vec![1., 1., 1.]);

    let mut g = Graph::<f64>::new();
    let p = g.variable(t(&[3], &[0.3, -2., 5.]));
    let sq = g.mul(p, p).unwrap();
    let s = g.sum(sq);
    let half = g.scale(s, 0.5);
    let grads = g.backward(half).unwrap();
    assert_eq!(grads.get(p).unwrap().to_f64_vec(), vec![0.3, -2., 5.]);

    assert!(matches!(g.backward(p), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn frozen_params_receive_no_gradient() {
    let mut store = Params::<f64>::new();
    store.insert("enc.w", t(&[2], &[1., 2.]));
    store.insert("dec.w", t(&[2], &[3., 4.]));
    let mut g = Graph::new();
    g.freeze_prefix("enc.");
    let a = g.param(&store, "enc.w").unwrap();
    let b = g.param(&store, "dec.w").unwrap();
    let p = g.mul(a, b).unwrap();
    let s = g.sum(p);
    let grads = g.backward(s).unwrap().params(&g);
    assert!(!grads.contains_key("enc.w"));
    assert_eq!(grads["dec.w"].to_f64_vec(), vec![1., 2.]);
}

#[test]
fn grad_check_linear_is_exact_to_rounding() {
    let err = grad_check(
        |g, xs| {
            let y = g.scale(xs[0], 3.0);
            Ok(g.sum(y))
        },
        &[t(&[4], &[0.1, 0.2, -0.3, 1.0])],
        1e-4,
    )
    .unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn grad_check_masked_positions_are_zero() {
    let mask = Mask::new(&[5], vec![false, true, false, false, true]).unwrap();
    let x = t(&[5], &[0.1, 0.7, -0.2, 0.4, 2.0]);
    let mut g = Graph::new();
    let v = g.variable(x.clone());
    let m = g.masked_fill(v, &mask, f64::NEG_INFINITY).unwrap();
    let s = g.softmax(m, 0).unwrap();
    let l = probe(&mut g, s, 1).unwrap();
    let grad = g.backward(l).unwrap();
    let gx = grad.get(v).unwrap();
    assert_eq!(gx.data()[1], 0.0);
    assert_eq!(gx.data()[4], 0.0);
    let err = grad_check(
        |g, xs| {
            let m = g.masked_fill(xs[0], &mask, f64::NEG_INFINITY)?;
            let s = g.softmax(m, 0)?;
            probe(g, s, 1)
        },
        &[x],
        1e-4,
    )
    .unwrap();
    assert!(err < TOL, "{err}");
}

/// Every primitive against central differences on 20 random shapes/seeds.
#[test]
fn primitives_pass_grad_check_on_random_instances() {
    type Case = fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>>);
    let cases: Vec<(&str, Case)> = vec![
        ("matmul", |r| {
            let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
            (vec![random(r, &[m, k]), random(r, &[k, n])], Box::new(|g, x| {
                let y = g.matmul(x[0], x[1])?;
                probe(g, y, 2)
            }))
        }),
        ("batched matmul_nt", |r| {
            let (b, m, k, n) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..4));
            (vec![random(r, &[b, m, k]), random(r, &[b, n, k])], Box::new(|g, x| {
                let y = g.matmul_nt(x[0], x[1])?;
                probe(g, y, 3)
            }))
        }),
        ("shared matmul", |r| {
            let (b, m, k, n) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..4));
            (vec![random(r, &[b, m, k]), random(r, &[k, n]), random(r, &[n, k])], Box::new(|g, x| {
                let y = g.matmul(x[0], x[1])?;
                let z = g.matmul_nt(x[0], x[2])?;
                let s = g.add(y, z)?;
                probe(g, s, 4)
            }))
        }),
        ("broadcast add/sub/mul/div", |r| {
            let s = random_shape(r, 3);
            let bias = vec![s[2]];
            let mut col = s.clone();
            col[1] = 1;
            let mut den = random(r, &s);
            den.data_mut().iter_mut().for_each(|v| *v = 1.5 + v.abs());
            (vec![random(r, &s), random(r, &bias), random(r, &col), den], Box::new(|g, x| {
                let a = g.add(x[0], x[1])?;
                let b = g.mul(a, x[2])?;
                let c = g.sub(b, x[1])?;
                let d = g.div(c, x[3])?;
                probe(g, d, 5)
            }))
        }),
        ("unary", |r| {
            let s = random_shape(r, 2);
            let mut pos = random(r, &s);
            pos.data_mut().iter_mut().for_each(|v| *v = 0.5 + v.abs());
            let mut away = random(r, &s);
            away.data_mut().iter_mut().for_each(|v| *v += if *v >= 0.0 { 0.1 } else { -0.1 });
            (vec![random(r, &s), pos, away], Box::new(|g, x| {
                let e = g.exp(x[0]);
                let l = g.log(x[1]);
                let s = g.sigmoid(x[0]);
                let re = g.relu(x[2]);
                let ab = g.abs(x[2]);
                let sc = g.scale(e, -0.7);
                let sh = g.add_scalar(sc, 2.0);
                let mut acc = g.add(sh, l)?;
                for v in [s, re, ab] {
                    acc = g.add(acc, v)?;
                }
                probe(g, acc, 6)
            }))
        }),
        ("softmax", |r| {
            let s = random_shape(r, 3);
            let axis = r.gen_range(0..3);
            (vec![random(r, &s)], Box::new(move |g, x| {
                let y = g.softmax(x[0], axis)?;
                probe(g, y, 7)
            }))
        }),
        ("masked_fill", |r| {
            let s = random_shape(r, 2);
            let mask: Vec<bool> = (0..s[1]).map(|j| j % 2 == 1).collect();
            let m = Mask::new(&[1, s[1]], mask).unwrap();
            (vec![random(r, &s)], Box::new(move |g, x| {
                let y = g.masked_fill(x[0], &m, -3.0)?;
                probe(g, y, 8)
            }))
        }),
        ("max_over_axis", |r| {
            let s = random_shape(r, 3);
            let axis = r.gen_range(0..3);
            (vec![random(r, &s)], Box::new(move |g, x| {
                let (y, _) = g.max_over_axis(x[0], axis)?;
                probe(g, y, 9)
            }))
        }),
        ("sum/mean axis", |r| {
            let s = random_shape(r, 3);
            let axis = r.gen_range(0..3);
            (vec![random(r, &s)], Box::new(move |g, x| {
                let a = g.sum_axis(x[0], axis)?;
                let b = g.mean_axis(x[0], axis)?;
                let c = g.add(a, b)?;
                let m = g.mean(x[0]);
                let p = probe(g, c, 10)?;
                g.add(p, m)
            }))
        }),
        ("layer_norm", |r| {
            let mut s = random_shape(r, 2);
            s[1] += 1;
            let d = s[1];
            (vec![random(r, &s), random(r, &[d]), random(r, &[d])], Box::new(|g, x| {
                let y = g.layer_norm(x[0], x[1], x[2], 1e-5)?;
                probe(g, y, 11)
            }))
        }),
        ("concat/narrow/index_select", |r| {
            let s = random_shape(r, 3);
            let axis = r.gen_range(0..3);
            let mut s2 = s.clone();
            s2[axis] = r.gen_range(1..4);
            let total = s[axis] + s2[axis];
            let idx: Vec<usize> = (0..4).map(|_| r.gen_range(0..total)).collect();
            (vec![random(r, &s), random(r, &s2)], Box::new(move |g, x| {
                let c = g.concat(&[x[0], x[1]], axis)?;
                let n = g.narrow(c, axis, 1.min(total - 1), total - 1.min(total - 1))?;
                let i = g.index_select(c, axis, &idx)?;
                let a = probe(g, n, 12)?;
                let b = probe(g, i, 13)?;
                g.add(a, b)
            }))
        }),
        ("reshape/permute/transpose", |r| {
            let s = random_shape(r, 3);
            (vec![random(r, &s)], Box::new(move |g, x| {
                let p = g.permute(x[0], &[2, 0, 1])?;
                let sh = g.shape(p).to_vec();
                let q = g.reshape(p, &[sh[0] * sh[1], sh[2]])?;
                let t = g.transpose(q)?;
                probe(g, t, 14)
            }))
        }),
        ("cross_entropy", |r| {
            let (rows, v) = (r.gen_range(1..4), r.gen_range(2..6));
            let mut tg = Tensor::<f64>::zeros(&[rows, v]);
            for row in 0..rows {
                let a = r.gen_range(0.0..1.0);
                tg.data_mut()[row * v] = a;
                tg.data_mut()[row * v + v - 1] += 1.0 - a;
            }
            (vec![random(r, &[rows, v])], Box::new(move |g, x| g.cross_entropy(x[0], &tg, 0.1)))
        }),
        ("bce", |r| {
            let s = random_shape(r, 2);
            let n: usize = s.iter().product();
            let tg = Tensor::new(&s, (0..n).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap();
            let mut p = random(r, &s);
            p.data_mut().iter_mut().for_each(|v| *v = 0.2 + 0.3 * (*v + 1.0));
            (vec![random(r, &s), p], Box::new(move |g, x| {
                let a = g.bce_with_logits(x[0], &tg, 0.1)?;
                let b = g.bce(x[1], &tg, 0.1)?;
                g.add(a, b)
            }))
        }),
        ("im2col", |r| {
            let (h, w, c) = (r.gen_range(3..6), r.gen_range(3..6), r.gen_range(1..3));
            (vec![random(r, &[2, h, w, c])], Box::new(|g, x| {
                let y = g.im2col(x[0], 3, 2, 1)?;
                probe(g, y, 15)
            }))
        }),
    ];
    for (name, make) in cases {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed * 977 + name.len() as u64);
            let (inputs, f) = make(&mut rng);
            let err = grad_check(|g, x| f(g, x), &inputs, 1e-4).unwrap();
            assert!(err < TOL, "{name} seed {seed}: relative error {err}");
        }
    }
}

#[test]
fn dropout_is_identity_in_inference_and_seeded_in_training() {
    let x = t(&[100], &vec![1.0; 100]);
    let id = eval(|g| {
        let v = g.constant(x.clone());
        Ok(g.dropout(v, 0.3))
    });
    assert_eq!(id, x);

    let run = |seed| {
        let mut g = Graph::<f64>::training(seed);
        let v = g.constant(x.clone());
        let d = g.dropout(v, 0.3);
        g.value(d).clone()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
    let kept = run(3).data().iter().filter(|&&v| v > 0.0).count();
    assert!((50..90).contains(&kept));
    assert!(run(3).data().iter().all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
}

#[test]
fn backward_is_bitwise_deterministic() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::<f64>::new();
        let a = g.variable(random(&mut rng, &[3, 5, 4]));
        let b = g.variable(random(&mut rng, &[4, 6]));
        let y = g.matmul(a, b).unwrap();
        let s = g.softmax(y, 2).unwrap();
        let l = probe(&mut g, s, 21).unwrap();
        let grads = g.backward(l).unwrap();
        (grads.get(a).unwrap().clone(), grads.get(b).unwrap().clone())
    };
    let (a1, b1) = build();
    let (a2, b2) = build();
    let bits = |t: &Tensor<f64>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a1), bits(&a2));
    assert_eq!(bits(&b1), bits(&b2));
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(vals in prop::collection::vec(-30.0f64..30.0, 1..40), cols in 1usize..8) {
        let rows = vals.len() / cols;
        prop_assume!(rows > 0);
        let x = Tensor::new(&[rows, cols], vals[..rows * cols].to_vec()).unwrap();
        let s = eval(|g| { let v = g.constant(x.clone()); g.softmax(v, 1) });
        for r in 0..rows {
            let row = &s.data()[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn max_is_permutation_invariant(vals in prop::collection::vec(-5.0f64..5.0, 2..30), seed in 0u64..1000) {
        let t_len = vals.len();
        let mut perm: Vec<usize> = (0..t_len).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..t_len).rev() { perm.swap(i, rng.gen_range(0..=i)); }
        let shuffled: Vec<f64> = perm.iter().map(|&i| vals[i]).collect();
        let m1 = eval(|g| { let v = g.constant(Tensor::new(&[t_len, 1], vals.clone()).unwrap()); Ok(g.max_over_axis(v, 0)?.0) });
        let m2 = eval(|g| { let v = g.constant(Tensor::new(&[t_len, 1], shuffled.clone()).unwrap()); Ok(g.max_over_axis(v, 0)?.0) });
        prop_assert_eq!(m1.data()[0].to_bits(), m2.data()[0].to_bits());
    }

    #[test]
    fn layer_norm_ignores_constant_shift(vals in prop::collection::vec(-5.0f64..5.0, 2..10), shift in -10.0f64..10.0) {
        let d = vals.len();
        let run = |xs: Vec<f64>| eval(|g| {
            let x = g.constant(Tensor::new(&[d], xs).unwrap());
            let gain = g.constant(Tensor::ones(&[d]));
            let bias = g.constant(Tensor::zeros(&[d]));
            g.layer_norm(x, gain, bias, 1e-5)
        });
        let a = run(vals.clone());
        let b = run(vals.iter().map(|v| v + shift).collect());
        prop_assert!(a.max_abs_diff(&b) < 1e-6);
    }
}
