//! Dataset-level set metrics, precision at K and ingredient mentions in
//! generated instructions.

use inverse_cooking::ingredient_decoder::IngredientSet;
use inverse_cooking::metrics::{
    cardinality_error, instruction_ingredient_pr, mean_precision_at_k, ConfusionAccumulator, EvaluationReport,
};
use inverse_cooking::vocab::IngredientVocabulary;
use inverse_cooking::Error;

fn main() -> Result<(), Error> {
    let names = ["flour", "salt", "sugar", "olive oil", "tomato", "basil"];
    let vocab = IngredientVocabulary::from_counts(names.iter().map(|n| (n.to_string(), 10)).collect(), vec![])?;
    let id = |n: &str| vocab.id(n).unwrap();
    let set = |ns: &[&str]| IngredientSet::new(ns.iter().map(|n| id(n)));

    let predicted = vec![set(&["flour", "salt", "sugar"]), set(&["tomato", "basil"]), set(&["olive oil", "salt"])];
    let truth = vec![set(&["flour", "sugar"]), set(&["tomato", "basil", "olive oil"]), set(&["olive oil", "salt"])];
    let rankings: Vec<Vec<usize>> = vec![
        vec![id("flour"), id("sugar"), id("salt"), id("basil"), id("tomato"), id("olive oil")],
        vec![id("tomato"), id("basil"), id("salt"), id("olive oil"), id("flour"), id("sugar")],
        vec![id("salt"), id("olive oil"), id("tomato"), id("basil"), id("flour"), id("sugar")],
    ];

    let mut acc = ConfusionAccumulator::new(vocab.len());
    for (p, g) in predicted.iter().zip(&truth) {
        acc.update(p, g)?;
    }
    let (iou, f1) = acc.global_iou_f1()?;
    println!("global IoU {iou:.4}, F1 {f1:.4}, (tp, fp, fn) = {:?}", acc.totals());
    for (i, f) in acc.per_ingredient_f1() {
        println!("  {:<10} F1 {f:.3}", vocab.name(i));
    }
    let sizes: Vec<(usize, usize)> = predicted.iter().zip(&truth).map(|(p, g)| (p.len(), g.len())).collect();
    println!("cardinality error {:?}", cardinality_error(&sizes)?);
    println!("P@2 {:.4}", mean_precision_at_k(&rankings, &truth, 2)?);

    let instructions = ["Whisk the flour with the sugar.", "Add a pinch of salt and bake."];
    let scores = instruction_ingredient_pr(&instructions, &truth[0], &vocab);
    println!("mentions: recall {:.3}, precision {:.3}", scores.recall, scores.precision);

    let report = EvaluationReport::for_ingredients(&predicted, &rankings, &truth, vocab.len(), &[1, 2, 5])?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
