//! One transformer block conditioned on image rows and ingredient rows
//! under each fusion strategy, with the ingredient batch padded to a
//! common length.

use inverse_cooking::nn::{
    causal_mask, init_block, key_padding_mask, transformer_block, BlockSettings, Condition, Conditioning,
    DecoderConfig, FusionStrategy,
};
use inverse_cooking::tensor::{Graph, Params, Tensor};
use inverse_cooking::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn main() -> Result<(), Error> {
    let (b, t, p, k, d) = (2, 5, 4, 3, 16);
    let dec = DecoderConfig {
        n_blocks: 1,
        n_heads: 4,
        head_dim: 4,
        ffn_mult: 2,
    };
    let settings = BlockSettings::new(d, &dec, 0.0, 1e-5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let words = random(&mut rng, &[b, t, d]);
    let image = random(&mut rng, &[b, p, d]);
    let ingredients = random(&mut rng, &[b, k, d]);
    let lengths = [3, 2];

    for strategy in [
        FusionStrategy::Concatenated,
        FusionStrategy::Independent,
        FusionStrategy::SequentialImageFirst,
        FusionStrategy::SequentialIngredientsFirst,
    ] {
        let mut params = Params::new();
        init_block(&mut params, &mut ChaCha8Rng::seed_from_u64(1), "block", &settings, strategy);
        let mut g = Graph::new();
        let x = g.constant(words.clone());
        let cond = Conditioning {
            image: Some(Condition {
                rows: g.constant(image.clone()),
                mask: None,
            }),
            ingredients: Some(Condition {
                rows: g.constant(ingredients.clone()),
                mask: Some(key_padding_mask(&lengths, k)),
            }),
        };
        let y = transformer_block(&mut g, &params, "block", x, &cond, Some(&causal_mask(t)), strategy, &settings)?;
        let out = g.value(y);
        let norm = out.data().iter().map(|v| v * v).sum::<f32>().sqrt();
        println!("{strategy:?}: output {:?}, {} parameters, norm {norm:.4}", out.shape(), params.num_values());
    }
    Ok(())
}
