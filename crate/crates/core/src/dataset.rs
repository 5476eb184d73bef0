//! Corpus records and their encoded, trainable form.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::load_features;
use crate::tensor::{Scalar, Tensor};
use crate::vocab::{clip_tokens, IngredientVocabulary, WordVocabulary};
use crate::Error;

/// One corpus line: `{id, title, ingredients, instructions, image?}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecipeRecord {
    pub id: String,
    pub title: String,
    pub ingredients: Vec<String>,
    pub instructions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, Error> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(value);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), Error> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A sample ready for training: image features, ingredient ids in listing
/// order and the tokenized recipe.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    /// `[P, d]` features, or `[H, W, C]` for the conv encoder.
    pub image: Tensor<f32>,
    pub ingredients: Vec<usize>,
    pub tokens: Vec<usize>,
}

/// Stacks the images of `examples[idx]` into one batch tensor.
pub fn stack_images<F: Scalar>(examples: &[Example], idx: &[usize]) -> Result<Tensor<F>, Error> {
    let first = examples
        .get(*idx.first().ok_or_else(|| Error::Validation("empty batch".into()))?)
        .ok_or_else(|| Error::Validation("batch index out of range".into()))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(idx.len() * first.image.len());
    for &i in idx {
        let ex = &examples[i];
        if ex.image.shape() != shape.as_slice() {
            return Err(Error::Validation(format!(
                "image of `{}` has shape {:?}, expected {shape:?}",
                ex.id,
                ex.image.shape()
            )));
        }
        data.extend(ex.image.data().iter().map(|&v| F::from_f64_lossy(v as f64)));
    }
    let mut full = vec![idx.len()];
    full.extend(shape);
    Ok(Tensor::new(&full, data)?)
}

/// Settings for turning corpus records into [`Example`]s.
#[derive(Clone, Copy, Debug)]
pub struct EncodeOptions {
    /// Longer ingredient lists keep their first entries.
    pub max_ingredients: usize,
    /// Longer token sequences are clipped, keeping `<eor>` last.
    pub max_tokens: usize,
}

/// Encodes records whose `image` points at a feature file, relative to
/// `base`. Records left without any known ingredient are skipped; the
/// second value counts them.
pub fn encode_records(
    records: &[RecipeRecord],
    base: &Path,
    ingredients: &IngredientVocabulary,
    words: &WordVocabulary,
    opts: EncodeOptions,
) -> Result<(Vec<Example>, usize), Error> {
    let mut out = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for r in records {
        let mut ids = ingredients.encode_list(&r.ingredients);
        if ids.is_empty() {
            skipped += 1;
            continue;
        }
        ids.truncate(opts.max_ingredients);
        let rel = r
            .image
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("record `{}` has no image features", r.id)))?;
        let image = load_features(&base.join(rel))?.features;
        out.push(Example {
            id: r.id.clone(),
            image,
            ingredients: ids,
            tokens: clip_tokens(words.tokenize_recipe(r), opts.max_tokens),
        });
    }
    Ok((out, skipped))
}

/// Reads a JSONL split and encodes it; feature paths resolve against the
/// file's directory.
pub fn load_split(
    path: &Path,
    ingredients: &IngredientVocabulary,
    words: &WordVocabulary,
    opts: EncodeOptions,
) -> Result<(Vec<Example>, usize), Error> {
    let records: Vec<RecipeRecord> = read_jsonl(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    encode_records(&records, base, ingredients, words, opts)
}
