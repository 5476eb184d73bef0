//! The whole pipeline on disk: synthetic corpus, vocabularies, stage-1
//! ingredient model, stage-2 instruction decoder on the frozen encoder,
//! then recipes generated from predicted ingredients.
//!
//! `cargo run --release --example recipe_pipeline [epochs]`

use inverse_cooking::dataset::{load_split, read_jsonl, EncodeOptions, RecipeRecord};
use inverse_cooking::ingredient_decoder::{IngredientModel, IngredientModelKind, IngredientSet, SampleOptions};
use inverse_cooking::instruction_decoder::{generate_all, perplexity, Ablation, GeneratedRecipe, RecipeModel};
use inverse_cooking::nn::{FusionStrategy, ModelConfig};
use inverse_cooking::synthetic::{generate, write_dataset, SyntheticSpec};
use inverse_cooking::tensor::Params;
use inverse_cooking::training::{predict_ingredients, train_ingredients, train_recipe, TrainConfig};
use inverse_cooking::vocab::{build_ingredient_vocab, count_ingredients, VocabConfig, WordVocabulary};
use inverse_cooking::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Error> {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(8);
    let dir = std::env::temp_dir().join("invcook-pipeline-example");
    let spec = SyntheticSpec {
        n_samples: 400,
        noise: 0.5,
        ..Default::default()
    };
    write_dataset(&generate(&spec)?, &dir)?;

    let records: Vec<RecipeRecord> = read_jsonl(&dir.join("train.jsonl"))?;
    let counts = count_ingredients(&records);
    let ingredients = build_ingredient_vocab(counts.iter().map(|(n, c)| (n.as_str(), *c)), &VocabConfig::default())?;
    let words = WordVocabulary::from_corpus(&records, 2);
    println!("{} ingredients, {} words", ingredients.len(), words.len());

    let mut config = ModelConfig {
        n_ingredients: ingredients.len(),
        vocab_size: words.len(),
        ..ModelConfig::desk()
    };
    let opts = EncodeOptions {
        max_ingredients: config.max_ingredients,
        max_tokens: config.max_instruction_words,
    };
    let (train, _) = load_split(&dir.join("train.jsonl"), &ingredients, &words, opts)?;
    let (val, _) = load_split(&dir.join("val.jsonl"), &ingredients, &words, opts)?;
    let (test, _) = load_split(&dir.join("test.jsonl"), &ingredients, &words, opts)?;
    config.image_positions = train[0].image.shape()[0];
    config.d_model = train[0].image.shape()[1];

    let cfg = TrainConfig {
        max_epochs: epochs,
        ..TrainConfig::desk()
    };
    let stage1 = IngredientModel::new(IngredientModelKind::FfBce, config.clone())?;
    let mut p1 = Params::<f32>::new();
    stage1.init(&mut p1, &mut ChaCha8Rng::seed_from_u64(0));
    let s1 = train_ingredients(&stage1, p1, &train, &val, &cfg, |_| {})?;
    println!("stage 1: best val loss {:.4}", s1.best_val_loss);

    let stage2 = RecipeModel::new(Ablation::Full, FusionStrategy::Concatenated, config.clone())?;
    let mut p2 = Params::<f32>::new();
    stage2.init(&mut p2, &mut ChaCha8Rng::seed_from_u64(0));
    let s2 = train_recipe(&stage2, p2, &s1.best, &train, &val, &cfg, |r| {
        eprintln!("stage 2 epoch {:>2}  val ppl {:.3}", r.epoch, r.val_loss.exp())
    })?;
    println!("stage 2: test perplexity {:.3}", perplexity(&stage2, &s2.best, &test)?);

    let shown = &test[..3];
    let predicted = predict_ingredients(&stage1, &s1.best, shown, &SampleOptions::default())?;
    let sets: Vec<IngredientSet> = predicted
        .iter()
        .map(|p| if p.set.is_empty() { IngredientSet::new(p.ranking.first().copied()) } else { p.set.clone() })
        .collect();
    let generated = generate_all(&stage2, &s2.best, shown, &sets)?;
    for ((ex, gen), set) in shown.iter().zip(&generated).zip(&sets) {
        let recipe = GeneratedRecipe::render(&ex.id, gen, set, &words, &ingredients);
        println!("\n{}: {}", recipe.id, recipe.title);
        println!("  ingredients: {}", recipe.ingredients.join(", "));
        for step in &recipe.instructions {
            println!("  - {step}");
        }
    }
    Ok(())
}
