#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bioalbert::tokenizer::{Vocab, WORD_BOUNDARY};

pub const DRUGS: [&str; 8] = [
    "aspirin",
    "metformin",
    "imatinib",
    "insulin",
    "heparin",
    "warfarin",
    "statin",
    "ibuprofen",
];
pub const DISEASES: [&str; 8] = [
    "fever",
    "diabetes",
    "leukemia",
    "thrombosis",
    "stroke",
    "arthritis",
    "asthma",
    "migraine",
];
pub const GENES: [&str; 6] = ["brca", "tp53", "egfr", "kras", "myc", "abl"];
pub const FUNCTION_WORDS: [&str; 23] = [
    "the", "drug", "treats", "in", "patients", ".", "gene", "causes", "binds", "protein", "cells", "a", "mutated",
    "is", "risk", "of", "with", "high", "low", "and", "not", "does", "disease",
];

/// Every word of the toy language as a whole-word piece: 45 pieces, 50 ids.
pub fn toy_vocab() -> Vocab {
    let pieces = FUNCTION_WORDS
        .iter()
        .chain(&DRUGS)
        .chain(&DISEASES)
        .chain(&GENES)
        .map(|w| (format!("{WORD_BOUNDARY}{w}"), -(45f64).ln()))
        .collect();
    Vocab::from_pieces(pieces).unwrap()
}

pub fn treated_by(drug: usize) -> &'static str {
    DISEASES[drug]
}

pub fn caused_by(gene: usize) -> &'static str {
    DISEASES[(gene + 2) % DISEASES.len()]
}

/// One sentence of the toy language; the entity choices are deterministic
/// functions of each other so masked words are predictable.
pub fn sentence<R: Rng>(rng: &mut R) -> String {
    let d = rng.gen_range(0..DRUGS.len());
    let g = rng.gen_range(0..GENES.len());
    match rng.gen_range(0..4) {
        0 => format!("the drug {} treats {} in patients .", DRUGS[d], treated_by(d)),
        1 => format!("the gene {} causes {} .", GENES[g], caused_by(g)),
        2 => format!("{} binds the protein {} in cells .", DRUGS[d], GENES[d % GENES.len()]),
        _ => format!("a mutated gene {} is a high risk of {} .", GENES[g], caused_by(g)),
    }
}

/// `n` sentences, one per line, in documents of five separated by empty lines.
pub fn template_corpus(n: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::new();
    for i in 0..n {
        if i > 0 && i % 5 == 0 {
            out.push('\n');
        }
        out.push_str(&sentence(&mut rng));
        out.push('\n');
    }
    out
}
