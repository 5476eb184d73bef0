//! Turning per-ingredient probabilities into sets: strict-threshold
//! cumulative sampling for target-distribution models and top-c selection
//! with a predicted cardinality.

use inverse_cooking::ingredient_decoder::{dc_sample, td_sample};

fn main() {
    let names = ["flour", "salt", "sugar", "butter", "egg", "milk"];
    let probs = [0.05, 0.30, 0.10, 0.25, 0.20, 0.10];
    let show = |ids: &[usize]| ids.iter().map(|&i| names[i]).collect::<Vec<_>>().join(", ");

    for threshold in [0.25, 0.5, 0.75, 0.9] {
        println!("td_sample  mass > {threshold:<4}: {}", show(td_sample(&probs, threshold).ids()));
    }
    // Logits over set sizes 0..=4.
    for card in [[0.0f64, 3.0, 1.0, 0.5, 0.1], [0.0, 0.2, 0.4, 2.5, 0.3]] {
        let c = card.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        println!("dc_sample  cardinality {c}: {}", show(dc_sample(&probs, &card).ids()));
    }
}
