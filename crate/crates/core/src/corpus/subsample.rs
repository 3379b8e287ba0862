use rand::seq::index::sample;

use super::{stats, RawDocument, RelationSchema};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

pub const DEFAULT_TOLERANCE: f64 = 0.05;
pub const DEFAULT_MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone)]
pub struct Subsample {
    /// Indices into the full corpus, ascending.
    pub indices: Vec<usize>,
    pub documents: Vec<RawDocument>,
    pub distance: f64,
    pub attempts: usize,
    pub seed: u64,
}

/// Normalized non-NA relation distribution over the relations present in the
/// full data, in schema order.
fn distribution(docs: &[RawDocument], schema: &RelationSchema, support: &[usize]) -> Vec<f64> {
    let s = stats(docs, schema);
    let total: usize = support.iter().map(|&i| s.triple_counts[i].1).sum();
    support
        .iter()
        .map(|&i| {
            if total == 0 {
                0.0
            } else {
                s.triple_counts[i].1 as f64 / total as f64
            }
        })
        .collect()
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// L1 distance between the non-NA relation distributions of `subset` and `full`.
pub fn label_distance(subset: &[RawDocument], full: &[RawDocument], schema: &RelationSchema) -> f64 {
    let full_stats = stats(full, schema);
    let support: Vec<usize> = schema
        .positive_indices()
        .filter(|&i| full_stats.triple_counts[i].1 > 0)
        .collect();
    l1_distance(
        &distribution(subset, schema, &support),
        &distribution(full, schema, &support),
    )
}

/// Repeatedly draws uniform `n`-document subsets until the label distribution
/// is within `tolerance` (L1) of the full corpus.
pub fn subsample(
    docs: &[RawDocument],
    schema: &RelationSchema,
    n: usize,
    seed: u64,
    tolerance: f64,
    max_attempts: usize,
) -> Result<Subsample> {
    if n > docs.len() {
        return Err(Error::Config(format!(
            "subsample size {n} exceeds corpus size {}",
            docs.len()
        )));
    }
    let full_stats = stats(docs, schema);
    let support: Vec<usize> = schema
        .positive_indices()
        .filter(|&i| full_stats.triple_counts[i].1 > 0)
        .collect();
    let target = distribution(docs, schema, &support);
    let mut rng = stream(seed, Stream::Sampling);
    let mut best = f64::INFINITY;
    for attempt in 1..=max_attempts.max(1) {
        let mut indices = sample(&mut rng, docs.len(), n).into_vec();
        indices.sort_unstable();
        let subset: Vec<RawDocument> = indices.iter().map(|&i| docs[i].clone()).collect();
        let distance = l1_distance(&distribution(&subset, schema, &support), &target);
        if distance <= tolerance {
            return Ok(Subsample {
                indices,
                documents: subset,
                distance,
                attempts: attempt,
                seed,
            });
        }
        best = best.min(distance);
    }
    Err(Error::Subsample {
        attempts: max_attempts,
        best_distance: best,
    })
}
