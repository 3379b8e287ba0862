use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RawDocument, RelationSchema};
use crate::error::{io_err, json_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub documents: usize,
    /// Schema size including NA.
    pub relation_types: usize,
    pub entity_pairs: usize,
    pub na_pairs: usize,
    /// Fraction of ordered entity pairs (h ≠ t) without any gold relation.
    pub na_ratio: f64,
    pub total_triples: usize,
    /// Gold triple count per relation id, in schema order.
    pub triple_counts: Vec<(String, usize)>,
}

pub fn stats(docs: &[RawDocument], schema: &RelationSchema) -> CorpusStats {
    let mut pairs = 0;
    let mut na = 0;
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for d in docs {
        let p = d.num_ordered_pairs();
        pairs += p;
        na += p - d.labeled_pairs().len();
        for l in &d.labels {
            if let Some(i) = schema.index_of(&l.r) {
                *counts.entry(i).or_default() += 1;
            }
        }
    }
    let triple_counts: Vec<(String, usize)> = schema
        .positive_indices()
        .map(|i| (schema.get(i).id.clone(), counts.get(&i).copied().unwrap_or(0)))
        .collect();
    CorpusStats {
        documents: docs.len(),
        relation_types: schema.len(),
        entity_pairs: pairs,
        na_pairs: na,
        na_ratio: if pairs == 0 { 0.0 } else { na as f64 / pairs as f64 },
        total_triples: triple_counts.iter().map(|(_, c)| c).sum(),
        triple_counts,
    }
}

/// Gold triple count per schema index (NA slot holds the NA pair count).
pub fn relation_frequencies(docs: &[RawDocument], schema: &RelationSchema) -> Vec<usize> {
    let s = stats(docs, schema);
    let mut f: Vec<usize> = s.triple_counts.iter().map(|(_, c)| *c).collect();
    f.push(s.na_pairs);
    f
}

pub fn save_stats(path: impl AsRef<Path>, s: &CorpusStats) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_vec_pretty(s).map_err(json_err(path))?;
    std::fs::write(path, json).map_err(io_err(path))
}
