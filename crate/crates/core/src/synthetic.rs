//! Seeded synthetic dishes.
//!
//! Every ingredient owns a fixed random unit direction; an image is the sum
//! of its ingredients' directions (plus a style direction) at every grid
//! position, with Gaussian noise on top. Configured anchor/partner pairs
//! co-occur with a fixed probability, which gives dependency-aware models
//! something to exploit. Titles and instructions come from templates.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::RecipeRecord;
use crate::nn::{save_features, ImageFeatures, Provenance};
use crate::tensor::Tensor;
use crate::training::mix;
use crate::Error;

pub const INGREDIENT_NAMES: [&str; 40] = [
    "salt", "pepper", "flour", "sugar", "butter", "egg", "onion", "garlic", "rice", "bean", "milk", "tomato", "cheese",
    "chicken", "beef", "potato", "carrot", "lemon", "basil", "oregano", "cream", "honey", "vinegar", "mushroom",
    "spinach", "bacon", "corn", "pasta", "ginger", "cinnamon", "celery", "yogurt", "walnut", "shrimp", "pork", "apple",
    "zucchini", "thyme", "parsley", "lentil",
];

const VERBS: [&str; 8] = ["chop", "mix", "add", "stir", "fold", "whisk", "slice", "toss"];

/// Title adjective and two closing instructions per style.
const STYLES: [(&str, [&str; 2]); 4] = [
    ("spicy", ["add chili to taste", "serve hot"]),
    ("creamy", ["simmer until thick", "serve warm"]),
    ("rustic", ["cook over low heat", "serve in bowls"]),
    ("baked", ["bake until golden", "let cool before serving"]),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_ingredients: usize,
    pub min_card: usize,
    pub max_card: usize,
    /// `(anchor, partner)` ingredient indices; partners only ever appear
    /// together with their anchor.
    pub pairs: Vec<(usize, usize)>,
    /// Probability that an anchor brings its partner along.
    pub pair_prob: f64,
    /// Grid positions `P`.
    pub positions: usize,
    /// Feature width `d_e`.
    pub dim: usize,
    /// Standard deviation of the per-coordinate feature noise.
    pub noise: f64,
    /// Length of the style direction added to every position; 0 disables.
    pub style_strength: f64,
    pub seed: u64,
    /// Train and validation fractions; the test split takes the rest.
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_samples: 2000,
            n_ingredients: 30,
            min_card: 2,
            max_card: 8,
            pairs: vec![(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)],
            pair_prob: 0.9,
            positions: 16,
            dim: 64,
            noise: 1.0,
            style_strength: 1.0,
            seed: 0,
            train_fraction: 0.8,
            val_fraction: 0.1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), Error> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_ingredients == 0 || self.n_ingredients > INGREDIENT_NAMES.len() {
            return fail(format!("n_ingredients must lie in 1..={}", INGREDIENT_NAMES.len()));
        }
        if self.min_card < 1 || self.min_card > self.max_card {
            return fail(format!("cardinality range {}..={} is empty", self.min_card, self.max_card));
        }
        let mut used = BTreeSet::new();
        for &(a, b) in &self.pairs {
            if a >= self.n_ingredients || b >= self.n_ingredients || a == b || !used.insert(a) || !used.insert(b) {
                return fail(format!("pair ({a}, {b}) is invalid or overlaps another pair"));
            }
        }
        if self.n_ingredients - self.pairs.len() < self.max_card {
            return fail("too few free ingredients for max_card".into());
        }
        if !(0.0..=1.0).contains(&self.pair_prob) {
            return fail("pair_prob must lie in [0, 1]".into());
        }
        if self.positions == 0 || self.dim == 0 {
            return fail("positions and dim must be positive".into());
        }
        if !(self.noise >= 0.0 && self.style_strength >= 0.0) {
            return fail("noise and style_strength must be non-negative".into());
        }
        if !(self.train_fraction > 0.0 && self.val_fraction >= 0.0 && self.train_fraction + self.val_fraction <= 1.0) {
            return fail("split fractions must be positive and sum to at most 1".into());
        }
        Ok(())
    }

    pub fn ingredient_names(&self) -> &[&'static str] {
        &INGREDIENT_NAMES[..self.n_ingredients]
    }

    /// Unit direction of every ingredient, then of every style.
    fn directions(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, 0xD1, 0));
        let mut unit = || {
            let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect::<Vec<f64>>()
        };
        let ingr = (0..self.n_ingredients).map(|_| unit()).collect();
        let styles = (0..STYLES.len()).map(|_| unit()).collect();
        (ingr, styles)
    }
}

/// One generated dish.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub id: String,
    /// Ingredient indices in the order they were drawn.
    pub ingredients: Vec<usize>,
    pub style: usize,
    pub title: String,
    pub instructions: Vec<String>,
    pub features: ImageFeatures<f32>,
}

impl SyntheticSample {
    pub fn record(&self, spec: &SyntheticSpec, image: Option<String>) -> RecipeRecord {
        let names = spec.ingredient_names();
        RecipeRecord {
            id: self.id.clone(),
            title: self.title.clone(),
            ingredients: self.ingredients.iter().map(|&i| names[i].to_string()).collect(),
            instructions: self.instructions.clone(),
            image,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub train: Vec<SyntheticSample>,
    pub val: Vec<SyntheticSample>,
    pub test: Vec<SyntheticSample>,
}

impl SyntheticDataset {
    pub fn splits(&self) -> [(&'static str, &[SyntheticSample]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

/// Draws an ingredient list: cardinality uniform in the configured range,
/// free ingredients uniformly without replacement, and each anchor followed
/// by its partner with probability `pair_prob`.
pub fn sample_ingredients<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Vec<usize> {
    let partners: BTreeSet<usize> = spec.pairs.iter().map(|p| p.1).collect();
    let mut pool: Vec<usize> = (0..spec.n_ingredients).filter(|i| !partners.contains(i)).collect();
    pool.shuffle(rng);
    let target = rng.gen_range(spec.min_card..=spec.max_card);
    let mut list = Vec::with_capacity(spec.max_card);
    for id in pool {
        if list.len() >= target {
            break;
        }
        let partner = spec.pairs.iter().find(|p| p.0 == id).map(|p| p.1);
        // Always roll for the partner so the coin stream does not depend on
        // how full the list is.
        let bring = partner.is_some() && rng.gen_bool(spec.pair_prob);
        if partner.is_some() && list.len() + 1 == spec.max_card {
            // No room for a partner: only non-anchors fill the last slot.
            continue;
        }
        list.push(id);
        if bring {
            list.push(partner.unwrap());
        }
    }
    list
}

/// Per-position sum of ingredient directions plus the style direction,
/// with `N(0, noise^2)` added to every coordinate.
pub fn render_features<R: Rng>(spec: &SyntheticSpec, ingredients: &[usize], style: usize, rng: &mut R) -> ImageFeatures<f32> {
    let (dirs, styles) = spec.directions();
    render_with(spec, &dirs, &styles, ingredients, style, rng)
}

fn render_with<R: Rng>(
    spec: &SyntheticSpec,
    dirs: &[Vec<f64>],
    styles: &[Vec<f64>],
    ingredients: &[usize],
    style: usize,
    rng: &mut R,
) -> ImageFeatures<f32> {
    let mut base = vec![0.0f64; spec.dim];
    for &i in ingredients {
        for (b, d) in base.iter_mut().zip(&dirs[i]) {
            *b += d;
        }
    }
    if spec.style_strength > 0.0 {
        for (b, d) in base.iter_mut().zip(&styles[style]) {
            *b += spec.style_strength * d;
        }
    }
    let noise = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).unwrap();
    let mut data = Vec::with_capacity(spec.positions * spec.dim);
    for _ in 0..spec.positions {
        for &b in &base {
            let n = if spec.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push((b + n) as f32);
        }
    }
    ImageFeatures {
        features: Tensor::new(&[spec.positions, spec.dim], data).expect("P x d"),
        provenance: Provenance::Synthetic,
    }
}

/// Title and instruction segments. Ingredients are mentioned in ascending
/// index order, two per segment, each exactly once; two closing segments
/// depend on the style.
pub fn render_instructions(spec: &SyntheticSpec, ingredients: &[usize], style: usize) -> (String, Vec<String>) {
    let names = spec.ingredient_names();
    let mut sorted = ingredients.to_vec();
    sorted.sort_unstable();
    let (adj, closing) = STYLES[style];
    let title = match sorted.as_slice() {
        [] => adj.to_string(),
        [a] => format!("{adj} {}", names[*a]),
        [a, b, ..] => format!("{adj} {} and {}", names[*a], names[*b]),
    };
    let mut segments: Vec<String> = sorted
        .chunks(2)
        .map(|c| match c {
            [x] => format!("{} the {}", VERBS[x % VERBS.len()], names[*x]),
            [x, y] => format!("{} the {} and {}", VERBS[x % VERBS.len()], names[*x], names[*y]),
            _ => unreachable!(),
        })
        .collect();
    segments.extend(closing.iter().map(|s| s.to_string()));
    (title, segments)
}

/// Generates the full dataset; sample `i` depends only on the spec and `i`.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset, Error> {
    spec.validate()?;
    let (dirs, styles) = spec.directions();
    let mut samples: Vec<SyntheticSample> = (0..spec.n_samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 0x5A, i as u64));
            let ingredients = sample_ingredients(spec, &mut rng);
            let style = rng.gen_range(0..STYLES.len());
            let features = render_with(spec, &dirs, &styles, &ingredients, style, &mut rng);
            let (title, instructions) = render_instructions(spec, &ingredients, style);
            SyntheticSample {
                id: format!("syn-{i:05}"),
                ingredients,
                style,
                title,
                instructions,
                features,
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, 0x59, 0));
    samples.shuffle(&mut rng);
    let n_train = (spec.train_fraction * spec.n_samples as f64).round() as usize;
    let n_val = ((spec.val_fraction * spec.n_samples as f64).round() as usize).min(spec.n_samples - n_train);
    let test = samples.split_off(n_train + n_val);
    let val = samples.split_off(n_train);
    Ok(SyntheticDataset {
        spec: spec.clone(),
        train: samples,
        val,
        test,
    })
}

/// Writes `{train,val,test}.jsonl` and `features/{id}.icft` under `dir`.
pub fn write_dataset(data: &SyntheticDataset, dir: &Path) -> Result<(), Error> {
    let features = dir.join("features");
    std::fs::create_dir_all(&features).map_err(|e| Error::io(&features, e))?;
    for (name, samples) in data.splits() {
        let path = dir.join(format!("{name}.jsonl"));
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = std::io::BufWriter::new(file);
        for s in samples {
            let rel = format!("features/{}.icft", s.id);
            save_features(&dir.join(&rel), &s.features.features)?;
            serde_json::to_writer(&mut w, &s.record(&data.spec, Some(rel)))?;
            w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
