//! Saves a feature file and a freshly initialized model checkpoint, loads
//! both back and checks they are bit-identical.

use inverse_cooking::ingredient_decoder::{IngredientModel, IngredientModelKind};
use inverse_cooking::nn::{load_features, save_features, ModelConfig};
use inverse_cooking::tensor::{Params, Tensor};
use inverse_cooking::training::{AdamState, Checkpoint, CheckpointMeta, ModelSpec, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("invcook-checkpoint-example");
    std::fs::create_dir_all(&dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let features = Tensor::new(&[16, 64], (0..16 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let feature_path = dir.join("image.icft");
    save_features(&feature_path, &features)?;
    let loaded = load_features(&feature_path)?;
    println!("features {:?} round trip: {}", loaded.features.shape(), loaded.features == features);

    let config = ModelConfig::desk();
    let kind = IngredientModelKind::TfSet;
    let model = IngredientModel::new(kind, config.clone())?;
    let mut params = Params::<f32>::new();
    model.init(&mut params, &mut rng);
    let ck = Checkpoint {
        params,
        optimizer: AdamState::new(),
        meta: CheckpointMeta {
            model: ModelSpec::Ingredients { kind },
            config,
            train: TrainConfig::desk_for(kind),
            epoch: 0,
            best_val_loss: None,
            adam_step: 0,
            ingredients: None,
            words: None,
        },
    };
    let path = dir.join("tf-set.ckpt");
    ck.save(&path)?;
    let back = Checkpoint::load(&path)?;
    let size = std::fs::metadata(&path)?.len();
    println!(
        "checkpoint: {} tensors, {} values, {size} bytes, round trip: {}",
        back.params.len(),
        back.params.num_values(),
        back == ck
    );
    Ok(())
}
