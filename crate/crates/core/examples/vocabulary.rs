//! Canonicalizes raw ingredient names into a dictionary, prints the rename
//! chain of a few names, then tokenizes an instruction list.

use inverse_cooking::vocab::{build_ingredient_vocab, VocabConfig, WordVocabulary};
use inverse_cooking::Error;

const RAW: [(&str, usize); 12] = [
    ("Cheddar Cheese", 40),
    ("bacon cheddar cheese", 12),
    ("cheese", 30),
    ("gorgonzola cheese", 11),
    ("cheese blend", 14),
    ("olive oil", 55),
    ("extra virgin olive oil", 18),
    ("Tomatoes", 25),
    ("cherry tomatoes", 13),
    ("salt", 80),
    ("saffron threads", 2),
    ("sugar", 45),
];

fn main() -> Result<(), Error> {
    let vocab = build_ingredient_vocab(RAW.iter().copied(), &VocabConfig::default())?;
    println!("{} canonical ingredients:", vocab.len());
    print!("{}", vocab.to_tsv());
    println!("\nrename log:");
    print!("{}", vocab.merge_log_tsv());
    for raw in ["bacon cheddar cheese", "cherry tomatoes", "saffron threads"] {
        println!("{raw:>24} -> {:<16} id {:?}", vocab.canonical(raw), vocab.lookup(raw));
    }

    let instructions = ["Preheat the oven to 200 degrees.", "Toss the tomatoes with olive oil and salt.", "Roast until soft."];
    let words = WordVocabulary::build(instructions.iter(), 1);
    let tokens = words.tokenize(&instructions);
    println!("\n{} words, {} tokens: {tokens:?}", words.len(), tokens.len());
    for segment in words.segments(&tokens) {
        println!("  {}", words.detokenize(&segment));
    }
    Ok(())
}
