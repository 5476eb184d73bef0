//! Trains the set transformer and the feed-forward BCE baseline on
//! synthetic features and compares their test F1.
//!
//! `cargo run --release --example ingredient_prediction [epochs]`

use inverse_cooking::dataset::Example;
use inverse_cooking::ingredient_decoder::{IngredientModel, IngredientModelKind, IngredientSet, SampleOptions};
use inverse_cooking::metrics::ConfusionAccumulator;
use inverse_cooking::nn::ModelConfig;
use inverse_cooking::synthetic::{generate, SyntheticSample, SyntheticSpec};
use inverse_cooking::tensor::Params;
use inverse_cooking::training::{predict_ingredients, train_ingredients, TrainConfig};
use inverse_cooking::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn examples(samples: &[SyntheticSample]) -> Vec<Example> {
    samples
        .iter()
        .map(|s| Example {
            id: s.id.clone(),
            image: s.features.features.clone(),
            ingredients: s.ingredients.clone(),
            tokens: Vec::new(),
        })
        .collect()
}

fn main() -> Result<(), Error> {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(10);
    let spec = SyntheticSpec {
        n_samples: 800,
        noise: 0.5,
        ..Default::default()
    };
    let data = generate(&spec)?;
    let (train, val, test) = (examples(&data.train), examples(&data.val), examples(&data.test));
    let config = ModelConfig {
        n_ingredients: spec.n_ingredients,
        image_positions: spec.positions,
        d_model: spec.dim,
        ..ModelConfig::desk()
    };
    for kind in [IngredientModelKind::FfBce, IngredientModelKind::TfSet] {
        let model = IngredientModel::new(kind, config.clone())?;
        let mut params = Params::<f32>::new();
        model.init(&mut params, &mut ChaCha8Rng::seed_from_u64(0));
        let cfg = TrainConfig {
            max_epochs: epochs,
            ..TrainConfig::desk_for(kind)
        };
        let out = train_ingredients(&model, params, &train, &val, &cfg, |r| {
            eprintln!("{kind} epoch {:>3}  train {:.4}  val {:.4}", r.epoch, r.train_loss, r.val_loss)
        })?;
        let preds = predict_ingredients(&model, &out.best, &test, &SampleOptions::default())?;
        let mut acc = ConfusionAccumulator::new(spec.n_ingredients);
        for (p, e) in preds.iter().zip(&test) {
            acc.update(&p.set, &IngredientSet::new(e.ingredients.iter().copied()))?;
        }
        let (iou, f1) = acc.global_iou_f1()?;
        println!("{kind}: test IoU {iou:.4}, F1 {f1:.4} (best epoch {})", out.best_epoch);
        let first = &preds[0];
        println!("  first test sample: predicted {:?}, true {:?}", first.set.ids(), test[0].ingredients);
    }
    Ok(())
}
