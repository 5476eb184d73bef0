use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::DecoderConfig;
use crate::training::{adam_step, AdamConfig, AdamState};
use crate::vocab::EOI_ID;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        instruction_decoder: DecoderConfig {
            n_blocks: 1,
            n_heads: 2,
            head_dim: 4,
            ffn_mult: 2,
        },
        n_ingredients: 6,
        vocab_size: 10,
        image_positions: 3,
        max_instruction_words: 12,
        dropout: 0.0,
        ..ModelConfig::desk()
    }
}

fn model(ablation: Ablation, strategy: FusionStrategy) -> (RecipeModel, Params<f64>) {
    let m = RecipeModel::new(ablation, strategy, tiny_config()).unwrap();
    let mut p = Params::new();
    m.init(&mut p, &mut ChaCha8Rng::seed_from_u64(7));
    (m, p)
}

fn images(b: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..b * 3 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(&[b, 3, 8], data).unwrap()
}

fn recipe() -> Vec<usize> {
    vec![SOR_ID, 4, 5, EOI_ID, 6, 7, 8, EOI_ID, 9, EOI_ID, EOR_ID]
}

#[test]
fn ingredient_encoding_shapes() {
    let (_, p) = model(Ablation::Full, FusionStrategy::Concatenated);
    let mut g = Graph::new();
    let one = encode_ingredients(&mut g, &p, &IngredientSet::new([3])).unwrap();
    assert_eq!(g.shape(one), &[1, 8]);
    let a = encode_ingredients(&mut g, &p, &IngredientSet::new([5, 0, 2])).unwrap();
    let b = encode_ingredients(&mut g, &p, &IngredientSet::new([2, 5, 0])).unwrap();
    assert_eq!(g.shape(a), &[3, 8]);
    assert_eq!(g.value(a), g.value(b));
    let table = p.get(INGREDIENT_EMBED).unwrap();
    assert_eq!(&g.value(a).data()[..8], table.row(0));
    assert!(encode_ingredients(&mut g, &p, &IngredientSet::empty()).is_err());
    assert!(encode_ingredients(&mut g, &p, &IngredientSet::new([6])).is_err());
}

#[test]
fn ablations_attend_over_the_expected_rows() {
    for (ablation, expected) in [(Ablation::I2r, 3), (Ablation::L2r, 4), (Ablation::Full, 7)] {
        let (m, p) = model(ablation, FusionStrategy::Concatenated);
        assert_eq!(m.condition_positions(4), expected);
        let mut g = Graph::new();
        let sets = [IngredientSet::new([0, 1, 2, 3])];
        let cond = m.conditioning(&mut g, &p, Some(&images(1, 1)), Some(&sets)).unwrap();
        let rows: usize = [&cond.image, &cond.ingredients].into_iter().flatten().map(|c| g.shape(c.rows)[1]).sum();
        assert_eq!(rows, expected, "{ablation:?}");
    }
    let (i2r, p) = model(Ablation::I2r, FusionStrategy::Concatenated);
    assert!(!p.contains(INGREDIENT_EMBED));
    assert_eq!(i2r.wiring(), FusionStrategy::SingleCondition);
    let (_, p) = model(Ablation::L2r, FusionStrategy::Concatenated);
    assert!(p.names().all(|n| !n.starts_with("image_encoder.")));
    assert!(RecipeModel::new(Ablation::Full, FusionStrategy::SingleCondition, tiny_config()).is_err());
}

fn zero_output(p: &mut Params<f64>) {
    for name in [format!("{WORD_OUT}.w"), format!("{WORD_OUT}.b")] {
        for v in p.get_mut(&name).unwrap().data_mut() {
            *v = 0.0;
        }
    }
}

#[test]
fn uniform_output_gives_log_v_and_perplexity_v() {
    let (m, mut p) = model(Ablation::Full, FusionStrategy::Independent);
    zero_output(&mut p);
    let mut g = Graph::new();
    let sets = [IngredientSet::new([1, 2])];
    let cond = m.conditioning(&mut g, &p, Some(&images(1, 2)), Some(&sets)).unwrap();
    let (loss, n) = m.instruction_nll(&mut g, &p, &cond, &[recipe()]).unwrap();
    assert_eq!(n, recipe().len() - 1);
    assert!((g.value(loss).item() - 10f64.ln()).abs() < 1e-12);

    let ex = Example {
        id: "a".into(),
        image: images(1, 2).reshaped(&[3, 8]).unwrap().cast(),
        ingredients: vec![1, 2],
        tokens: recipe(),
    };
    assert!((perplexity(&m, &p, &[ex]).unwrap() - 10.0).abs() < 1e-9);
}

fn examples(n: usize) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    (0..n)
        .map(|i| {
            let k = rng.gen_range(1..4);
            let mut tokens = vec![SOR_ID];
            for _ in 0..rng.gen_range(1..8) {
                tokens.push(if rng.gen_bool(0.2) { EOI_ID } else { rng.gen_range(4..10) });
            }
            tokens.push(EOR_ID);
            Example {
                id: format!("e{i}"),
                image: images(1, 100 + i as u64).reshaped(&[3, 8]).unwrap().cast(),
                ingredients: (0..k).map(|j| (i + 2 * j) % 6).collect(),
                tokens,
            }
        })
        .collect()
}

#[test]
fn perplexity_is_exp_of_the_corpus_nll() {
    let (m, p) = model(Ablation::Full, FusionStrategy::SequentialImageFirst);
    let data = examples(9);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut g = Graph::new();
    let (loss, _) = batch_nll(&m, &mut g, &p, &data, &idx).unwrap();
    let ppl = perplexity(&m, &p, &data).unwrap();
    assert_eq!(ppl, g.value(loss).item().exp());
    assert!(perplexity(&m, &p, &[]).is_err());
}

#[test]
fn nll_is_deterministic_and_validates_tokens() {
    let (m, p) = model(Ablation::L2r, FusionStrategy::Concatenated);
    let sets = [IngredientSet::new([0, 4])];
    let run = |tokens: Vec<usize>| {
        let mut g = Graph::new();
        let cond = m.conditioning(&mut g, &p, None, Some(&sets))?;
        let (l, _) = m.instruction_nll(&mut g, &p, &cond, &[tokens])?;
        Ok::<f64, Error>(g.value(l).item())
    };
    assert_eq!(run(recipe()).unwrap().to_bits(), run(recipe()).unwrap().to_bits());
    assert!(run(vec![SOR_ID, 10, EOR_ID]).is_err());
    assert!(run(vec![4, 5, EOR_ID]).is_err());
    assert!(run(vec![SOR_ID, 4, 5]).is_err());
    assert!(run([vec![SOR_ID], vec![4; 11], vec![EOR_ID]].concat()).is_err());
}

#[test]
fn logits_ignore_future_tokens() {
    for strategy in [FusionStrategy::Concatenated, FusionStrategy::SequentialIngredientsFirst] {
        let (m, p) = model(Ablation::Full, strategy);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sets = [IngredientSet::new([1, 3, 5])];
        let base: Vec<usize> = (0..9).map(|_| rng.gen_range(0..10)).collect();
        let run = |ids: &[usize]| {
            let mut g = Graph::new();
            let cond = m.conditioning(&mut g, &p, Some(&images(1, 4)), Some(&sets)).unwrap();
            let l = m.logits(&mut g, &p, &cond, ids, 1).unwrap();
            g.value(l).data().to_vec()
        };
        let full = run(&base);
        for t in 0..base.len() {
            let mut changed = base.clone();
            for id in &mut changed[t + 1..] {
                *id = (*id + 3) % 10;
            }
            let other = run(&changed);
            assert_eq!(full[..(t + 1) * 10], other[..(t + 1) * 10], "{strategy:?} step {t}");
        }
    }
}

#[test]
fn concatenated_fusion_ignores_ingredient_row_order() {
    let (m, p) = model(Ablation::Full, FusionStrategy::Concatenated);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rows: Vec<f64> = (0..2 * 5 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ids = [SOR_ID, 4, 5, 6, SOR_ID, 7, 8, 9];
    let run = |perm: &[usize]| {
        let mut data = Vec::new();
        for b in 0..2 {
            for &j in perm {
                data.extend_from_slice(&rows[(b * 5 + j) * 8..(b * 5 + j + 1) * 8]);
            }
        }
        let mut g = Graph::new();
        let x = g.constant(images(2, 5));
        let image = Condition {
            rows: encode_batch(&mut g, &p, &m.config, x).unwrap(),
            mask: None,
        };
        let ingr = Condition {
            rows: g.constant(Tensor::new(&[2, 5, 8], data).unwrap()),
            mask: None,
        };
        let cond = Conditioning {
            image: Some(image),
            ingredients: Some(ingr),
        };
        let l = m.logits(&mut g, &p, &cond, &ids, 2).unwrap();
        g.value(l).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    let base = run(&[0, 1, 2, 3, 4]);
    let mut perm = vec![0, 1, 2, 3, 4];
    for _ in 0..20 {
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        assert_eq!(run(&perm), base, "{perm:?}");
    }
}

#[test]
fn padded_batches_match_single_samples() {
    let (m, p) = model(Ablation::Full, FusionStrategy::Independent);
    let data = examples(5);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut g = Graph::new();
    let (batch, n) = batch_nll(&m, &mut g, &p, &data, &idx).unwrap();
    let mut total = 0.0;
    for i in idx {
        let mut g = Graph::new();
        let (l, k) = batch_nll(&m, &mut g, &p, &data, &[i]).unwrap();
        total += g.value(l).item() * k as f64;
    }
    assert!((g.value(batch).item() - total / n as f64).abs() < 1e-12);
}

#[test]
fn immediate_end_of_recipe_is_degenerate() {
    let (m, mut p) = model(Ablation::L2r, FusionStrategy::Concatenated);
    zero_output(&mut p);
    p.get_mut(&format!("{WORD_OUT}.b")).unwrap().data_mut()[EOR_ID] = 5.0;
    let out = m.generate(&p, None, Some(&[IngredientSet::new([2])])).unwrap();
    assert_eq!(out[0].tokens, vec![SOR_ID, EOR_ID]);
    assert!(out[0].degenerate);
    assert!(!out[0].truncated);
    assert!(out[0].title.is_empty() && out[0].instructions.is_empty());
}

#[test]
fn token_limit_sets_the_truncated_flag() {
    let (m, mut p) = model(Ablation::L2r, FusionStrategy::Concatenated);
    zero_output(&mut p);
    p.get_mut(&format!("{WORD_OUT}.b")).unwrap().data_mut()[6] = 5.0;
    let out = m.generate(&p, None, Some(&[IngredientSet::new([2])])).unwrap();
    assert_eq!(out[0].tokens.len(), 12);
    assert!(out[0].truncated);
    assert_eq!(out[0].title, vec![6; 11]);
}

#[test]
fn greedy_generation_matches_full_pass_argmax() {
    let (m, p) = model(Ablation::Full, FusionStrategy::SequentialImageFirst);
    let sets = vec![IngredientSet::new([0, 2]), IngredientSet::new([1, 3, 4])];
    let imgs = images(2, 6);
    let a = m.generate(&p, Some(&imgs), Some(&sets)).unwrap();
    assert_eq!(a, m.generate(&p, Some(&imgs), Some(&sets)).unwrap());
    for (b, gen) in a.iter().enumerate() {
        let prefix = &gen.tokens[..gen.tokens.len() - 1];
        let mut g = Graph::new();
        let one = Tensor::new(&[1, 3, 8], imgs.data()[b * 24..(b + 1) * 24].to_vec()).unwrap();
        let cond = m.conditioning(&mut g, &p, Some(&one), Some(&sets[b..b + 1])).unwrap();
        let l = m.logits(&mut g, &p, &cond, prefix, 1).unwrap();
        let lv = g.value(l).data();
        for (t, &next) in gen.tokens[1..].iter().enumerate() {
            assert_eq!(argmax(&lv[t * 10..(t + 1) * 10]), next);
        }
    }
}

#[test]
fn split_into_title_and_instructions() {
    let g = GeneratedTokens::from_tokens(recipe());
    assert_eq!(g.title, vec![4, 5]);
    assert_eq!(g.instructions, vec![vec![6, 7, 8], vec![9]]);
    assert!(!g.truncated && !g.degenerate);
    assert_eq!(segment_stats(&[g]), (2.0, 2.0));
}

#[test]
fn a_single_recipe_can_be_memorized() {
    let (m, mut p) = model(Ablation::L2r, FusionStrategy::Concatenated);
    let data = vec![Example {
        id: "x".into(),
        image: Tensor::zeros(&[3, 8]),
        ingredients: vec![1, 4],
        tokens: recipe(),
    }];
    let mut state = AdamState::new();
    for _ in 0..150 {
        let mut g = Graph::new();
        let (l, _) = batch_nll(&m, &mut g, &p, &data, &[0]).unwrap();
        let grads = g.backward(l).unwrap().params(&g);
        adam_step(&mut p, &grads, &mut state, &AdamConfig::default(), |_| 1e-2).unwrap();
    }
    assert!(mean_nll(&m, &p, &data).unwrap() < 0.01);
    let out = m.generate(&p, None, Some(&[IngredientSet::new([1, 4])])).unwrap();
    assert_eq!(out[0].tokens, recipe());
}
