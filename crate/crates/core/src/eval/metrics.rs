//! Text metrics for generated responses.
//!
//! Normalization, shared by every metric here: lowercase, delete every
//! character that is neither alphanumeric nor whitespace, split on
//! whitespace.

use std::collections::{HashMap, HashSet};

pub fn normalize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Unigram F1 over normalized tokens with multiset overlap. Zero when either
/// side is empty or nothing overlaps.
pub fn unigram_f1(hypothesis: &str, reference: &str) -> f64 {
    let hyp = normalize(hypothesis);
    let reference = normalize(reference);
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &reference {
        *counts.entry(w).or_default() += 1;
    }
    let mut overlap = 0usize;
    for w in &hyp {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / hyp.len() as f64;
    let recall = overlap as f64 / reference.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// `Π_{n=2..4} unique(n-grams) / total(n-grams)` over normalized tokens; a
/// factor with no n-grams counts as 1.
pub fn diversity(text: &str) -> f64 {
    let tokens = normalize(text);
    (2..=4)
        .map(|n| {
            if tokens.len() < n {
                return 1.0;
            }
            let grams: Vec<&[String]> = tokens.windows(n).collect();
            let unique: HashSet<&[String]> = grams.iter().copied().collect();
            unique.len() as f64 / grams.len() as f64
        })
        .product()
}
