//! The `invcook` command line: file in, file out, seeded.
//!
//! Exit status is 0 on success, 1 for bad flags, files or configurations,
//! and 2 for failures during the work itself. Progress goes to standard
//! error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_split, read_jsonl, EncodeOptions, Example, RecipeRecord};
use crate::ingredient_decoder::{IngredientModel, IngredientModelKind, IngredientPrediction, IngredientSet, SampleOptions};
use crate::instruction_decoder::{generate_all, perplexity, segment_stats, Ablation, GeneratedRecipe, RecipeModel};
use crate::metrics::{instruction_ingredient_pr, mean_mention_scores, EvaluationReport};
use crate::nn::{load_features, EncoderKind, FusionStrategy, ModelConfig};
use crate::synthetic::{generate, write_dataset, SyntheticSpec};
use crate::tensor::Params;
use crate::training::{
    predict_ingredients, train_ingredients, train_recipe, Checkpoint, EpochReport, ModelSpec,
    TrainConfig,
};
use crate::vocab::{build_ingredient_vocab, count_ingredients, IngredientVocabulary, VocabConfig, WordVocabulary};
use crate::Error;

const INGREDIENTS_TSV: &str = "ingredients.tsv";
const MERGE_LOG_TSV: &str = "merge_log.tsv";
const WORDS_TSV: &str = "words.tsv";

#[derive(Debug, Parser)]
#[command(name = "invcook", version, about = "Recipe generation from food image features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus: train/val/test JSONL plus feature files.
    Synth(SynthArgs),
    /// Build ingredient and word vocabularies from a training split.
    BuildVocab(BuildVocabArgs),
    /// Stage 1: train the image encoder and an ingredient predictor.
    TrainIngredients(TrainIngredientsArgs),
    /// Stage 2: train the instruction decoder on a frozen stage-1 encoder.
    TrainRecipe(TrainRecipeArgs),
    /// Generate recipes for images.
    Generate(GenerateArgs),
    /// Score a checkpoint on a split and write a metrics report.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator settings as JSON; omitted fields take their defaults.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BuildVocabArgs {
    /// Training split (JSONL).
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for ingredients.tsv, merge_log.tsv and words.tsv.
    #[arg(long)]
    pub out: PathBuf,
    /// Vocabulary settings as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainIngredientsArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Validation split used for early stopping.
    #[arg(long)]
    pub val: PathBuf,
    /// Directory written by `build-vocab`.
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "tf-set", value_parser = parse::<IngredientModelKind>)]
    pub ingredient_model: IngredientModelKind,
    /// `{"model": ..., "train": ...}` as JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainRecipeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Stage-1 checkpoint providing the image encoder and vocabularies.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "concat", value_parser = parse::<FusionStrategy>)]
    pub strategy: FusionStrategy,
    #[arg(long, default_value = "full", value_parser = parse::<Ablation>)]
    pub ablation: Ablation,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Stage-2 checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Stage-1 checkpoint whose predictions condition the decoder.
    #[arg(long)]
    pub ingredients_model: Option<PathBuf>,
    /// A single feature file.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    pub image: Option<PathBuf>,
    /// A JSONL split.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Condition on the split's own ingredients instead of predictions.
    #[arg(long, requires = "data")]
    pub gt_ingredients: bool,
    /// Output JSONL; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Metrics JSON; standard output when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// For recipe models: condition generation on this model's predictions
    /// instead of ground-truth ingredients.
    #[arg(long)]
    pub ingredients_model: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Model and training settings of a training command.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Defaults to the desk preset of the chosen model.
    pub train: Option<TrainConfig>,
}

/// Parses `args` (program name first), runs the command and returns the
/// exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

pub fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Synth(a) => synth(a),
        Command::BuildVocab(a) => build_vocab(a),
        Command::TrainIngredients(a) => train_ingredients_cmd(a),
        Command::TrainRecipe(a) => train_recipe_cmd(a),
        Command::Generate(a) => generate_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_text(path: Option<&Path>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn synth(a: SynthArgs) -> Result<(), Error> {
    let mut spec: SyntheticSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    let data = generate(&spec)?;
    write_dataset(&data, &a.out)?;
    eprintln!(
        "wrote {} train, {} val, {} test samples to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        a.out.display()
    );
    Ok(())
}

fn build_vocab(a: BuildVocabArgs) -> Result<(), Error> {
    let cfg: VocabConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => VocabConfig::default(),
    };
    let records: Vec<RecipeRecord> = read_jsonl(&a.data)?;
    let counts = count_ingredients(&records);
    let ingredients = build_ingredient_vocab(counts.iter().map(|(n, c)| (n.as_str(), *c)), &cfg)?;
    let words = WordVocabulary::from_corpus(&records, cfg.min_word_count);
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    ingredients.save(&a.out.join(INGREDIENTS_TSV), &a.out.join(MERGE_LOG_TSV))?;
    words.save(&a.out.join(WORDS_TSV))?;
    eprintln!("{} ingredients, {} words", ingredients.len(), words.len());
    Ok(())
}

fn load_vocab_dir(dir: &Path) -> Result<(IngredientVocabulary, WordVocabulary), Error> {
    Ok((
        IngredientVocabulary::load(&dir.join(INGREDIENTS_TSV), &dir.join(MERGE_LOG_TSV))?,
        WordVocabulary::load(&dir.join(WORDS_TSV))?,
    ))
}

fn load_run_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => read_json(p),
        None => Ok(RunConfig::default()),
    }
}

/// Fills dictionary sizes from the vocabularies and the feature geometry
/// from the first example.
fn fit_config(config: &mut ModelConfig, ingr: &IngredientVocabulary, words: &WordVocabulary, first: &Example) -> Result<(), Error> {
    if config.encoder != EncoderKind::Projection {
        return Err(Error::Config("the command line trains on precomputed features (projection encoder)".into()));
    }
    config.n_ingredients = ingr.len();
    config.vocab_size = words.len();
    let shape = first.image.shape();
    config.image_positions = shape[0];
    config.d_model = shape[1];
    config.validate()
}

fn encode_options(config: &ModelConfig) -> EncodeOptions {
    EncodeOptions {
        max_ingredients: config.max_ingredients,
        max_tokens: config.max_instruction_words,
    }
}

fn load_examples(
    path: &Path,
    ingr: &IngredientVocabulary,
    words: &WordVocabulary,
    config: &ModelConfig,
) -> Result<Vec<Example>, Error> {
    let (examples, skipped) = load_split(path, ingr, words, encode_options(config))?;
    if skipped > 0 {
        eprintln!("{}: skipped {skipped} records without a known ingredient", path.display());
    }
    if examples.is_empty() {
        return Err(Error::Validation(format!("{}: no usable records", path.display())));
    }
    Ok(examples)
}

fn report_epoch(r: &EpochReport) {
    eprintln!(
        "epoch {:>3}  train {:.4}  val {:.4}  lr {:.2e}",
        r.epoch, r.train_loss, r.val_loss, r.lr
    );
}

fn train_ingredients_cmd(a: TrainIngredientsArgs) -> Result<(), Error> {
    let run = load_run_config(a.config.as_deref())?;
    let (ingr, words) = load_vocab_dir(&a.vocab)?;
    let mut config = run.model;
    let mut train_cfg = run.train.unwrap_or_else(|| TrainConfig::desk_for(a.ingredient_model));
    if let Some(seed) = a.seed {
        train_cfg.seed = seed;
    }
    train_cfg.validate()?;
    let train = load_examples(&a.data, &ingr, &words, &config)?;
    fit_config(&mut config, &ingr, &words, &train[0])?;
    let val = load_examples(&a.val, &ingr, &words, &config)?;
    let model = IngredientModel::new(a.ingredient_model, config.clone())?;
    let mut params = Params::<f32>::new();
    model.init(&mut params, &mut ChaCha8Rng::seed_from_u64(train_cfg.seed));
    let out = train_ingredients(&model, params, &train, &val, &train_cfg, report_epoch)?;
    eprintln!("best epoch {} (val {:.4})", out.best_epoch, out.best_val_loss);
    let spec = ModelSpec::Ingredients {
        kind: a.ingredient_model,
    };
    Checkpoint::from_fit(out, spec, config, train_cfg, Some(ingr), Some(words)).save(&a.out)
}

fn vocabularies(ck: &Checkpoint, path: &Path) -> Result<(IngredientVocabulary, WordVocabulary), Error> {
    match (&ck.meta.ingredients, &ck.meta.words) {
        (Some(i), Some(w)) => Ok((i.clone(), w.clone())),
        _ => Err(Error::Config(format!("{}: checkpoint carries no vocabularies", path.display()))),
    }
}

fn ingredient_model(ck: &Checkpoint, path: &Path) -> Result<IngredientModel, Error> {
    match ck.meta.model {
        ModelSpec::Ingredients { kind } => IngredientModel::new(kind, ck.meta.config.clone()),
        _ => Err(Error::Config(format!("{}: not an ingredient model", path.display()))),
    }
}

fn recipe_model(ck: &Checkpoint, path: &Path) -> Result<RecipeModel, Error> {
    match ck.meta.model {
        ModelSpec::Recipe { ablation, strategy } => RecipeModel::new(ablation, strategy, ck.meta.config.clone()),
        _ => Err(Error::Config(format!("{}: not a recipe model", path.display()))),
    }
}

fn train_recipe_cmd(a: TrainRecipeArgs) -> Result<(), Error> {
    let run = load_run_config(a.config.as_deref())?;
    let stage1 = Checkpoint::load(&a.model)?;
    ingredient_model(&stage1, &a.model)?;
    let (ingr, words) = vocabularies(&stage1, &a.model)?;
    let mut config = run.model;
    let mut train_cfg = run.train.unwrap_or_else(TrainConfig::desk);
    if let Some(seed) = a.seed {
        train_cfg.seed = seed;
    }
    train_cfg.validate()?;
    let train = load_examples(&a.data, &ingr, &words, &config)?;
    fit_config(&mut config, &ingr, &words, &train[0])?;
    let s1 = &stage1.meta.config;
    if (s1.d_model, s1.image_positions, s1.encoder) != (config.d_model, config.image_positions, config.encoder) {
        return Err(Error::Config(format!(
            "{}: stage-1 encoder does not match this configuration",
            a.model.display()
        )));
    }
    let val = load_examples(&a.val, &ingr, &words, &config)?;
    let model = RecipeModel::new(a.ablation, a.strategy, config.clone())?;
    let mut params = Params::<f32>::new();
    model.init(&mut params, &mut ChaCha8Rng::seed_from_u64(train_cfg.seed));
    let out = train_recipe(&model, params, &stage1.params, &train, &val, &train_cfg, report_epoch)?;
    eprintln!("best epoch {} (val ppl {:.4})", out.best_epoch, out.best_val_loss.exp());
    let spec = ModelSpec::Recipe {
        ablation: a.ablation,
        strategy: a.strategy,
    };
    Checkpoint::from_fit(out, spec, config, train_cfg, Some(ingr), Some(words)).save(&a.out)
}

/// A predicted set, or the best-ranked ingredient when the prediction is
/// empty.
fn non_empty(pred: &IngredientPrediction) -> IngredientSet {
    if pred.set.is_empty() {
        IngredientSet::new(pred.ranking.first().copied())
    } else {
        pred.set.clone()
    }
}

/// Ingredient sets predicted by the stage-1 checkpoint at `path`.
fn predicted_sets(
    path: &Path,
    ingr: &IngredientVocabulary,
    examples: &[Example],
    threshold: f64,
) -> Result<Vec<IngredientPrediction>, Error> {
    let ck = Checkpoint::load(path)?;
    let model = ingredient_model(&ck, path)?;
    let (their_ingr, _) = vocabularies(&ck, path)?;
    if &their_ingr != ingr {
        return Err(Error::Config(format!(
            "{}: ingredient vocabulary differs from the recipe model's",
            path.display()
        )));
    }
    predict_ingredients(&model, &ck.params, examples, &SampleOptions { threshold })
}

fn generate_cmd(a: GenerateArgs) -> Result<(), Error> {
    let ck = Checkpoint::load(&a.model)?;
    let model = recipe_model(&ck, &a.model)?;
    let (ingr, words) = vocabularies(&ck, &a.model)?;
    let examples = match (&a.image, &a.data) {
        (Some(image), _) => {
            let features = load_features(image)?.features;
            let id = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            vec![Example {
                id,
                image: features,
                ingredients: Vec::new(),
                tokens: Vec::new(),
            }]
        }
        (None, Some(data)) => load_examples(data, &ingr, &words, &model.config)?,
        (None, None) => return Err(Error::Validation("pass --image or --data".into())),
    };
    let sets: Vec<IngredientSet> = if !model.ablation.uses_ingredients() {
        vec![IngredientSet::empty(); examples.len()]
    } else if a.gt_ingredients {
        examples.iter().map(|e| IngredientSet::new(e.ingredients.iter().copied())).collect()
    } else {
        let path = a.ingredients_model.as_deref().ok_or_else(|| {
            Error::Validation("--ingredients-model is required unless --gt-ingredients is given".into())
        })?;
        predicted_sets(path, &ingr, &examples, a.threshold)?.iter().map(non_empty).collect()
    };
    let generated = generate_all(&model, &ck.params, &examples, &sets)?;
    let mut text = String::new();
    for ((ex, gen), set) in examples.iter().zip(&generated).zip(&sets) {
        let rec = GeneratedRecipe::render(&ex.id, gen, set, &words, &ingr);
        text.push_str(&serde_json::to_string(&rec)?);
        text.push('\n');
    }
    let (segs, len) = segment_stats(&generated);
    eprintln!("{} recipes, {segs:.2} instructions of {len:.2} words on average", generated.len());
    write_text(a.out.as_deref(), &text)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<(), Error> {
    let ck = Checkpoint::load(&a.model)?;
    let (ingr, words) = vocabularies(&ck, &a.model)?;
    let examples = load_examples(&a.data, &ingr, &words, &ck.meta.config)?;
    let gt: Vec<IngredientSet> = examples
        .iter()
        .map(|e| IngredientSet::new(e.ingredients.iter().copied()))
        .collect();
    let report = match ck.meta.model {
        ModelSpec::Ingredients { .. } => {
            let model = ingredient_model(&ck, &a.model)?;
            let preds = predict_ingredients(&model, &ck.params, &examples, &SampleOptions { threshold: a.threshold })?;
            let sets: Vec<IngredientSet> = preds.iter().map(|p| p.set.clone()).collect();
            let ranks: Vec<Vec<usize>> = preds.iter().map(|p| p.ranking.clone()).collect();
            let ks: Vec<usize> = [1, 5, 10].into_iter().filter(|&k| k <= ingr.len()).collect();
            EvaluationReport::for_ingredients(&sets, &ranks, &gt, ingr.len(), &ks)?
        }
        ModelSpec::Recipe { .. } => {
            let model = recipe_model(&ck, &a.model)?;
            let ppl = perplexity(&model, &ck.params, &examples)?;
            let sets = match &a.ingredients_model {
                Some(path) => predicted_sets(path, &ingr, &examples, a.threshold)?.iter().map(non_empty).collect(),
                None => gt.clone(),
            };
            let generated = generate_all(&model, &ck.params, &examples, &sets)?;
            let scores: Vec<_> = generated
                .iter()
                .zip(&gt)
                .map(|(g, truth)| {
                    let text: Vec<String> = g.instructions.iter().map(|s| words.detokenize(s)).collect();
                    instruction_ingredient_pr(&text, truth, &ingr)
                })
                .collect();
            let (recall, precision) = mean_mention_scores(&scores);
            EvaluationReport {
                perplexity: Some(ppl),
                instr_recall: recall,
                instr_precision: precision,
                ..Default::default()
            }
        }
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write_text(a.report.as_deref(), &text)
}
