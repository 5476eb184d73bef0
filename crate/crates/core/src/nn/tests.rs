use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{grad_check_params, Graph, Mask, Params, Tensor, Var};
use crate::Error;

const STRATEGIES: [FusionStrategy; 4] = [
    FusionStrategy::Concatenated,
    FusionStrategy::Independent,
    FusionStrategy::SequentialImageFirst,
    FusionStrategy::SequentialIngredientsFirst,
];

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn settings(d: usize) -> BlockSettings {
    let dec = DecoderConfig {
        n_blocks: 1,
        n_heads: 2,
        head_dim: 3,
        ffn_mult: 2,
    };
    BlockSettings::new(d, &dec, 0.0, 1e-5)
}

fn block_params(seed: u64, s: &BlockSettings, strategy: FusionStrategy) -> Params<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Params::new();
    init_block(&mut p, &mut rng, "blk", s, strategy);
    // Randomize biases and norms so no gradient is trivially structured.
    for (_, t) in p.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
    p
}

struct Inputs {
    x: Tensor<f64>,
    img: Tensor<f64>,
    ingr: Tensor<f64>,
    ingr_lens: Vec<usize>,
}

fn inputs(seed: u64, b: usize, t: usize, p: usize, k: usize, d: usize) -> Inputs {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Inputs {
        x: random(&mut rng, &[b, t, d]),
        img: random(&mut rng, &[b, p, d]),
        ingr: random(&mut rng, &[b, k, d]),
        ingr_lens: (0..b).map(|i| k - i % k.min(2)).collect(),
    }
}

fn run_block(
    g: &mut Graph<f64>,
    p: &Params<f64>,
    inp: &Inputs,
    strategy: FusionStrategy,
    s: &BlockSettings,
    use_img: bool,
    use_ingr: bool,
) -> Result<Var, Error> {
    let t = inp.x.shape()[1];
    let x = g.constant(inp.x.clone());
    let cond = Conditioning {
        image: use_img.then(|| Condition {
            rows: g.constant(inp.img.clone()),
            mask: None,
        }),
        ingredients: use_ingr.then(|| Condition {
            rows: g.constant(inp.ingr.clone()),
            mask: Some(key_padding_mask(&inp.ingr_lens, inp.ingr.shape()[1])),
        }),
    };
    transformer_block(g, p, "blk", x, &cond, Some(&causal_mask(t)), strategy, s)
}

#[test]
fn causal_mask_examples() {
    assert_eq!(causal_mask(1).data(), &[false]);
    let m = causal_mask(3);
    assert_eq!(m.data(), &[false, true, true, false, false, true, false, false, false]);
    let m = causal_mask(7);
    for i in 0..7 {
        let allowed = (0..7).filter(|&j| !m.get(i * 7 + j)).count();
        assert_eq!(allowed, i + 1);
    }
}

#[test]
fn positional_encoding_examples() {
    let cfg = ModelConfig::desk();
    let a: Tensor<f32> = positional_encoding(cfg.max_instruction_words, cfg.d_model);
    let b: Tensor<f32> = positional_encoding(cfg.max_instruction_words, cfg.d_model);
    assert_eq!(a.shape(), &[cfg.max_instruction_words, cfg.d_model]);
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    for cfg in [ModelConfig::desk(), ModelConfig::paper()] {
        let t = cfg.max_instruction_words;
        let pe: Tensor<f32> = positional_encoding(t, cfg.d_model);
        for i in 0..t {
            for j in i + 1..t {
                assert_ne!(pe.row(i), pe.row(j), "rows {i} and {j}");
            }
        }
    }
}

#[test]
fn attention_single_key_returns_projected_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = AttentionShape { n_heads: 2, head_dim: 2 };
    let mut p = Params::<f64>::new();
    init_attention(&mut p, &mut rng, "att", 4, shape);
    let kv = random(&mut rng, &[1, 1, 4]);
    let out = |q: Tensor<f64>| {
        let mut g = Graph::new();
        let (q, kv) = (g.constant(q), g.constant(kv.clone()));
        let y = multi_head_attention(&mut g, &p, "att", q, kv, None, shape).unwrap();
        g.value(y).clone()
    };
    let a = out(random(&mut rng, &[1, 3, 4]));
    let b = out(random(&mut rng, &[1, 3, 4]));
    assert!(a.max_abs_diff(&b) < 1e-12);
    let mut g = Graph::new();
    let kv_v = g.constant(kv.clone());
    let v = linear(&mut g, &p, "att.v", kv_v).unwrap();
    let o = linear(&mut g, &p, "att.o", v).unwrap();
    assert!(g.value(o).data().iter().zip(&a.data()[..4]).all(|(x, y)| (x - y).abs() < 1e-12));
}

#[test]
fn attention_uniform_scores_average_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let shape = AttentionShape { n_heads: 1, head_dim: 4 };
    let mut p = Params::<f64>::new();
    init_attention(&mut p, &mut rng, "att", 4, shape);
    // Zero query projection makes every score equal.
    for name in ["att.q.w", "att.q.b"] {
        p.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    p.insert("att.o.w", Tensor::eye(4));
    p.get_mut("att.o.b").unwrap().data_mut().fill(0.0);
    let kv = random(&mut rng, &[1, 5, 4]);
    let mut g = Graph::new();
    let q = g.constant(random(&mut rng, &[1, 2, 4]));
    let kv_v = g.constant(kv);
    let y = multi_head_attention(&mut g, &p, "att", q, kv_v, None, shape).unwrap();
    let v = linear(&mut g, &p, "att.v", kv_v).unwrap();
    let mean = g.mean_axis(v, 1).unwrap();
    let (y, mean) = (g.value(y).clone(), g.value(mean).clone());
    for r in 0..2 {
        for c in 0..4 {
            assert!((y.data()[r * 4 + c] - mean.data()[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_causal_first_position_sees_only_itself() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = AttentionShape { n_heads: 2, head_dim: 2 };
    let mut p = Params::<f64>::new();
    init_attention(&mut p, &mut rng, "att", 4, shape);
    let x = random(&mut rng, &[1, 3, 4]);
    let first = |x: Tensor<f64>| {
        let mut g = Graph::new();
        let x = g.constant(x);
        let y = multi_head_attention(&mut g, &p, "att", x, x, Some(&causal_mask(3)), shape).unwrap();
        g.value(y).data()[..4].to_vec()
    };
    let mut y = x.clone();
    for v in &mut y.data_mut()[4..] {
        *v += 10.0;
    }
    assert_eq!(first(x), first(y));
}

#[test]
fn attention_fully_masked_query_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let shape = AttentionShape { n_heads: 1, head_dim: 2 };
    let mut p = Params::<f64>::new();
    init_attention(&mut p, &mut rng, "att", 2, shape);
    let mut g = Graph::new();
    let q = g.constant(random(&mut rng, &[1, 1, 2]));
    let kv = g.constant(random(&mut rng, &[1, 2, 2]));
    let mask = Mask::new(&[1, 1, 1, 2], vec![true, true]).unwrap();
    assert!(multi_head_attention(&mut g, &p, "att", q, kv, Some(&mask), shape).is_err());
}

#[test]
fn concatenated_with_one_condition_equals_single_condition() {
    let d = 6;
    let s = settings(d);
    let inp = inputs(11, 2, 4, 5, 3, d);
    let concat = block_params(1, &s, FusionStrategy::Concatenated);
    let single = block_params(1, &s, FusionStrategy::SingleCondition);
    assert_eq!(concat, single);
    for (img, ingr) in [(true, false), (false, true)] {
        let mut g = Graph::new();
        let a = run_block(&mut g, &concat, &inp, FusionStrategy::Concatenated, &s, img, ingr).unwrap();
        let b = run_block(&mut g, &single, &inp, FusionStrategy::SingleCondition, &s, img, ingr).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }
}

#[test]
fn concatenated_attends_over_k_plus_p_rows() {
    let mut g = Graph::<f64>::new();
    let img = g.constant(Tensor::zeros(&[2, 5, 3]));
    let ingr = g.constant(Tensor::zeros(&[2, 4, 3]));
    let cond = Conditioning {
        image: Some(Condition { rows: img, mask: None }),
        ingredients: Some(Condition {
            rows: ingr,
            mask: Some(key_padding_mask(&[4, 2], 4)),
        }),
    };
    let c = concat_conditions(&mut g, &cond).unwrap().unwrap();
    assert_eq!(g.shape(c.rows), &[2, 9, 3]);
    let m = c.mask.unwrap();
    assert_eq!(m.shape(), &[2, 1, 1, 9]);
    assert_eq!(m.count_set(), 2);
    assert!(m.get(9 + 7) && m.get(9 + 8));
}

#[test]
fn causal_block_ignores_future_positions() {
    let d = 6;
    let s = settings(d);
    for strategy in STRATEGIES {
        let p = block_params(2, &s, strategy);
        let inp = inputs(12, 2, 5, 4, 3, d);
        let mut changed = inputs(12, 2, 5, 4, 3, d);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for b in 0..2 {
            for t in 3..5 {
                for c in 0..d {
                    changed.x.data_mut()[(b * 5 + t) * d + c] = rng.gen_range(-5.0..5.0);
                }
            }
        }
        let mut g = Graph::new();
        let a = run_block(&mut g, &p, &inp, strategy, &s, true, true).unwrap();
        let b = run_block(&mut g, &p, &changed, strategy, &s, true, true).unwrap();
        let (a, b) = (g.value(a), g.value(b));
        for bi in 0..2 {
            let lo = bi * 5 * d;
            assert_eq!(&a.data()[lo..lo + 3 * d], &b.data()[lo..lo + 3 * d], "{strategy:?}");
        }
    }
}

#[test]
fn independent_fusion_is_symmetric_with_tied_attention() {
    let d = 6;
    let s = settings(d);
    let mut p = block_params(3, &s, FusionStrategy::Independent);
    let tied: Vec<(String, Tensor<f64>)> = p
        .iter()
        .filter(|(n, _)| n.starts_with("blk.img_attn."))
        .map(|(n, t)| (n.replace("img_attn", "ingr_attn"), t.clone()))
        .collect();
    for (n, t) in tied {
        p.insert(n, t);
    }
    let inp = inputs(13, 2, 4, 3, 3, d);
    let swapped = Inputs {
        x: inp.x.clone(),
        img: inp.ingr.clone(),
        ingr: inp.img.clone(),
        ingr_lens: vec![3, 3],
    };
    let plain = Inputs {
        ingr_lens: vec![3, 3],
        ..inp
    };
    let mut g = Graph::new();
    let a = run_block(&mut g, &p, &plain, FusionStrategy::Independent, &s, true, true).unwrap();
    let b = run_block(&mut g, &p, &swapped, FusionStrategy::Independent, &s, true, true).unwrap();
    assert_eq!(g.value(a), g.value(b));
}

#[test]
fn missing_condition_is_a_configuration_error() {
    let d = 6;
    let s = settings(d);
    let inp = inputs(14, 1, 2, 2, 2, d);
    for strategy in STRATEGIES {
        let p = block_params(4, &s, strategy);
        let mut g = Graph::new();
        let err = run_block(&mut g, &p, &inp, strategy, &s, false, strategy == FusionStrategy::Concatenated);
        if strategy == FusionStrategy::Concatenated {
            assert!(err.is_ok());
            let err = run_block(&mut g, &p, &inp, strategy, &s, false, false);
            assert!(matches!(err, Err(Error::Config(_))));
        } else {
            assert!(matches!(err, Err(Error::Config(_))), "{strategy:?}");
        }
    }
    let p = block_params(4, &s, FusionStrategy::SingleCondition);
    let mut g = Graph::new();
    let err = run_block(&mut g, &p, &inp, FusionStrategy::SingleCondition, &s, true, true);
    assert!(matches!(err, Err(Error::Config(_))));
}

#[test]
fn blocks_pass_grad_check_under_every_strategy() {
    let d = 4;
    let s = settings(d);
    for (i, strategy) in STRATEGIES.into_iter().enumerate() {
        let p = block_params(20 + i as u64, &s, strategy);
        let inp = inputs(30 + i as u64, 2, 3, 2, 3, d);
        let mut rng = ChaCha8Rng::seed_from_u64(40 + i as u64);
        // Small probe weights keep the loss near zero, so rounding noise in
        // the difference quotient stays below the relative-error floor for
        // coordinates whose true gradient is zero (attention key biases).
        let w = random(&mut rng, &[2, 3, d]).map(|v| 0.01 * v);
        let err = grad_check_params(
            |g: &mut Graph<f64>, p: &Params<f64>| -> Result<Var, Error> {
                let y = run_block(g, p, &inp, strategy, &s, true, true)?;
                let w = g.constant(w.clone());
                let y = g.mul(y, w)?;
                Ok(g.sum(y))
            },
            &p,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "{strategy:?}: {err}");
    }
}

#[test]
fn fusion_strategy_parses_cli_names() {
    for (s, want) in [
        ("concat", FusionStrategy::Concatenated),
        ("independent", FusionStrategy::Independent),
        ("seq-img", FusionStrategy::SequentialImageFirst),
        ("seq-ingr", FusionStrategy::SequentialIngredientsFirst),
    ] {
        assert_eq!(s.parse::<FusionStrategy>().unwrap(), want);
    }
    assert!("bogus".parse::<FusionStrategy>().is_err());
}

#[test]
fn zero_image_through_zero_bias_encoder_gives_zero_features() {
    let cfg = ModelConfig {
        encoder: EncoderKind::Conv,
        ..ModelConfig::desk()
    };
    cfg.validate().unwrap();
    let mut p = Params::<f32>::new();
    init_image_encoder(&mut p, &mut ChaCha8Rng::seed_from_u64(0), &cfg);
    let img = Tensor::zeros(&[cfg.image_size, cfg.image_size, cfg.image_channels]);
    let f = encode_image(ImageSource::Grid(img), &cfg, &p).unwrap();
    assert_eq!(f.features.shape(), &[16, cfg.d_model]);
    assert_eq!(f.provenance, Provenance::Encoded);
    assert!(f.features.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_encoder_is_deterministic() {
    let cfg = ModelConfig {
        encoder: EncoderKind::Conv,
        ..ModelConfig::desk()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = Params::<f32>::new();
    init_image_encoder(&mut p, &mut rng, &cfg);
    let n = cfg.image_size * cfg.image_size * cfg.image_channels;
    let img = Tensor::new(
        &[cfg.image_size, cfg.image_size, cfg.image_channels],
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let a = encode_image(ImageSource::Grid(img.clone()), &cfg, &p).unwrap();
    let b = encode_image(ImageSource::Grid(img), &cfg, &p).unwrap();
    assert_eq!(a, b);
    assert!(a.features.data().iter().any(|&v| v != 0.0));
}

#[test]
fn feature_file_round_trips_and_passes_through() {
    let cfg = ModelConfig {
        image_positions: 4,
        d_model: 8,
        ..ModelConfig::desk()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = Tensor::new(&[4, 8], (0..32).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.icft");
    save_features(&path, &t).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], b"ICFT");
    assert_eq!(bytes.len(), 14 + 32 * 4);
    let loaded = load_features(&path).unwrap();
    assert_eq!(loaded.provenance, Provenance::PrecomputedFile);
    let out = encode_image(ImageSource::Features(loaded), &cfg, &Params::new()).unwrap();
    assert_eq!(out.features, t);

    let wrong = ModelConfig {
        image_positions: 5,
        ..cfg
    };
    let loaded = load_features(&path).unwrap();
    assert!(matches!(
        encode_image(ImageSource::Features(loaded), &wrong, &Params::new()),
        Err(Error::Validation(_))
    ));
}

#[test]
fn malformed_feature_files_are_rejected() {
    assert!(read_features(&b"ICF"[..]).is_err());
    assert!(read_features(&b"XXXX\x01\x00\x01\x00\x00\x00\x01\x00\x00\x00\0\0\0\0"[..]).is_err());
    assert!(read_features(&b"ICFT\x01\x00\x01\x00\x00\x00\x02\x00\x00\x00\0\0\0\0"[..]).is_err());
    let ok = read_features(&b"ICFT\x01\x00\x01\x00\x00\x00\x01\x00\x00\x00\0\0\x80\x3f"[..]).unwrap();
    assert_eq!(ok.data(), &[1.0]);
}

#[test]
fn incremental_decoding_matches_full_pass() {
    let d = 6;
    let s = settings(d);
    let mut strategies = STRATEGIES.to_vec();
    strategies.push(FusionStrategy::SingleCondition);
    for strategy in strategies {
        let stack = DecoderStack {
            prefix: "dec".into(),
            n_blocks: 2,
            strategy,
            settings: s,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = Params::<f64>::new();
        stack.init(&mut p, &mut rng);
        p.init_normal(&mut rng, "emb", &[9, d], 1.0);
        let inp = inputs(15, 2, 4, 3, 3, d);
        let ids = [1, 4, 2, 8, 0, 3, 3, 5];
        let single = strategy == FusionStrategy::SingleCondition;

        let mut g = Graph::new();
        let cond = Conditioning {
            image: Some(Condition {
                rows: g.constant(inp.img.clone()),
                mask: None,
            }),
            ingredients: (!single).then(|| Condition {
                rows: g.constant(inp.ingr.clone()),
                mask: Some(key_padding_mask(&inp.ingr_lens, 3)),
            }),
        };
        let x = stack.embed(&mut g, &p, "emb", &ids, 2, 0).unwrap();
        let full = stack.forward(&mut g, &p, x, &cond).unwrap();
        let full = g.value(full).clone();

        let mut state = stack.start(&mut g, &p, &cond).unwrap();
        for t in 0..4 {
            let step_ids = [ids[t], ids[4 + t]];
            let x = stack.embed(&mut g, &p, "emb", &step_ids, 2, t).unwrap();
            let h = stack.step(&mut g, &p, &mut state, x).unwrap();
            let h = g.value(h);
            for b in 0..2 {
                for c in 0..d {
                    let want = full.data()[(b * 4 + t) * d + c];
                    assert!((h.data()[b * d + c] - want).abs() < 1e-12, "{strategy:?} t={t}");
                }
            }
        }
        assert_eq!(state.position(), 4);
    }
}
