//! Generates a small synthetic corpus, prints a sample and writes the
//! splits with their feature files to a temporary directory.

use inverse_cooking::synthetic::{generate, write_dataset, SyntheticSpec};
use inverse_cooking::Error;

fn main() -> Result<(), Error> {
    let spec = SyntheticSpec {
        n_samples: 200,
        seed: 7,
        ..Default::default()
    };
    let data = generate(&spec)?;
    let names = spec.ingredient_names();
    let s = &data.train[0];
    println!("{} ({} style)", s.id, s.style);
    println!("  ingredients: {:?}", s.ingredients.iter().map(|&i| names[i]).collect::<Vec<_>>());
    println!("  title: {}", s.title);
    for line in &s.instructions {
        println!("  - {line}");
    }
    println!("  features: {:?}", s.features.features.shape());

    let dir = std::env::temp_dir().join("invcook-synthetic-example");
    write_dataset(&data, &dir)?;
    for (split, samples) in data.splits() {
        println!("{split}: {} samples", samples.len());
    }
    println!("written to {}", dir.display());
    Ok(())
}
