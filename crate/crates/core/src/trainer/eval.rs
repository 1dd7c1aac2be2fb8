use std::cmp::Ordering;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math::{clamp_cos, dot, Matrix, NormalizedRows, RngState};

/// Verification accuracy on `num_pairs` sampled pairs, half same-class and half
/// different-class, at the best cosine threshold.
pub fn evaluate_pairs(embeddings: &Matrix, labels: &[usize], num_pairs: usize, rng: &mut RngState) -> Result<f64> {
    if embeddings.rows() != labels.len() {
        return Err(Error::Shape {
            context: "evaluate_pairs",
            expected: format!("{} labels", embeddings.rows()),
            got: labels.len().to_string(),
        });
    }
    if num_pairs < 2 {
        return Err(Error::config("train.eval_pairs", "need at least two pairs"));
    }
    let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let with_pairs: Vec<usize> = by_class
        .iter()
        .flat_map(|members| if members.len() >= 2 { members.as_slice() } else { &[] })
        .copied()
        .collect();
    if with_pairs.is_empty() {
        return Err(Error::Degenerate("no class has two samples to form a positive pair".into()));
    }
    if by_class.iter().filter(|m| !m.is_empty()).count() < 2 {
        return Err(Error::Degenerate("need two classes to form a negative pair".into()));
    }
    let unit = NormalizedRows::new(embeddings, "embedding")?.unit;
    let cos = |i: usize, j: usize| clamp_cos(dot(unit.row(i), unit.row(j)));

    let positives = num_pairs / 2;
    let mut scored = Vec::with_capacity(num_pairs);
    for _ in 0..positives {
        let i = with_pairs[rng.random_range(0..with_pairs.len())];
        let members = &by_class[labels[i]];
        let j = loop {
            let j = members[rng.random_range(0..members.len())];
            if j != i {
                break j;
            }
        };
        scored.push((cos(i, j), true));
    }
    for _ in positives..num_pairs {
        let (i, j) = loop {
            let i = rng.random_range(0..labels.len());
            let j = rng.random_range(0..labels.len());
            if labels[i] != labels[j] {
                break (i, j);
            }
        };
        scored.push((cos(i, j), false));
    }
    Ok(best_threshold_accuracy(&scored))
}

/// Highest accuracy of the rule `score >= t  =>  same` over every threshold `t`.
pub fn best_threshold_accuracy(scored: &[(f64, bool)]) -> f64 {
    if scored.is_empty() {
        return 0.0;
    }
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    // threshold above every score: everything predicted different
    let mut correct = sorted.iter().filter(|p| !p.1).count() as i64;
    let mut best = correct;
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            correct += if sorted[i].1 { 1 } else { -1 };
            i += 1;
        }
        best = best.max(correct);
    }
    best as f64 / sorted.len() as f64
}
