//! Long-tailed synthetic corpora in the DocRED layout.
//!
//! Each relation owns a pair of trigger words. A gold triple `(h, r, t)` is
//! realised as a sentence in which a mention of `h` is followed by one of
//! `r`'s triggers and then a mention of `t`. Relation descriptions are built
//! from the same trigger words, so descriptions and documents share surface
//! evidence. Relation frequencies follow a Zipf law and the fraction of
//! entity pairs without a relation is fixed by the configuration.

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use super::{Label, Mention, RawDocument, RelationDef, RelationSchema};
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub documents: usize,
    pub dev_documents: usize,
    pub test_documents: usize,
    /// Number of filler words.
    pub vocab_size: usize,
    /// Non-NA relation count.
    pub relations: usize,
    pub zipf_exponent: f64,
    pub na_ratio: f64,
    pub mean_entities: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            documents: 200,
            dev_documents: 40,
            test_documents: 40,
            vocab_size: 60,
            relations: 12,
            zipf_exponent: 1.2,
            na_ratio: 0.95,
            mean_entities: 6.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.relations < 2 {
            return bad(format!("relation count must be >= 2, got {}", self.relations));
        }
        if !(self.na_ratio > 0.0 && self.na_ratio < 1.0) {
            return bad(format!("NA ratio must lie in (0, 1), got {}", self.na_ratio));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return bad(format!("Zipf exponent must be >= 0, got {}", self.zipf_exponent));
        }
        if self.mean_entities < 2.0 {
            return bad(format!(
                "infeasible NA ratio: mean entity count {} leaves no entity pairs",
                self.mean_entities
            ));
        }
        if self.vocab_size < 4 {
            return bad(format!("vocabulary size must be >= 4, got {}", self.vocab_size));
        }
        if self.documents == 0 {
            return bad("document count must be positive".into());
        }
        let approx_pairs = self.documents as f64 * self.mean_entities * (self.mean_entities - 1.0);
        if (approx_pairs * (1.0 - self.na_ratio)).round() < 1.0 {
            return bad(format!(
                "infeasible NA ratio {}: fewer than one labeled pair expected over {} pairs",
                self.na_ratio, approx_pairs
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub schema: RelationSchema,
    pub train: Vec<RawDocument>,
    pub dev: Vec<RawDocument>,
    pub test: Vec<RawDocument>,
}

fn trigger(r: usize, k: usize) -> String {
    format!("trig{r:02}{}", (b'a' + k as u8) as char)
}

fn relation_id(r: usize) -> String {
    format!("R{r:02}")
}

/// Schema whose descriptions are sentences over each relation's triggers.
pub fn synthetic_schema(relations: usize) -> Result<RelationSchema> {
    let defs = (0..relations)
        .map(|r| RelationDef {
            id: relation_id(r),
            name: format!("relation {r:02}"),
            description: format!("the head is linked to the tail by {} or {}", trigger(r, 0), trigger(r, 1)),
        })
        .collect();
    RelationSchema::new(defs)
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let schema = synthetic_schema(cfg.relations)?;
    let split = |idx: u64, n: usize| -> Result<Vec<RawDocument>> {
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut rng = stream(cfg.seed.wrapping_add(idx.wrapping_mul(0x9e37_79b9_7f4a_7c15)), Stream::Data);
        generate_split(cfg, &mut rng, n, ["train", "dev", "test"][idx as usize])
    };
    Ok(SyntheticCorpus {
        train: split(0, cfg.documents)?,
        dev: split(1, cfg.dev_documents)?,
        test: split(2, cfg.test_documents)?,
        schema,
    })
}

fn filler(rng: &mut ChaCha8Rng, vocab: usize) -> String {
    format!("w{}", rng.random_range(0..vocab))
}

fn generate_split(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng, n: usize, tag: &str) -> Result<Vec<RawDocument>> {
    let name_pool = ((cfg.mean_entities * 40.0) as usize).max(100);
    let lo = (cfg.mean_entities - 2.0).round().max(2.0) as usize;
    let hi = (cfg.mean_entities + 2.0).round().max(lo as f64) as usize;
    let entity_counts: Vec<usize> = (0..n).map(|_| rng.random_range(lo..=hi)).collect();

    // Exact allocation of labeled pairs over the whole split.
    let mut pair_index = Vec::new();
    for (d, &k) in entity_counts.iter().enumerate() {
        for h in 0..k {
            for t in 0..k {
                if h != t {
                    pair_index.push((d, h, t));
                }
            }
        }
    }
    let positives = ((pair_index.len() as f64) * (1.0 - cfg.na_ratio)).round() as usize;
    if positives == 0 || positives > pair_index.len() {
        return Err(Error::Config(format!(
            "infeasible NA ratio {} for {} entity pairs",
            cfg.na_ratio,
            pair_index.len()
        )));
    }
    let zipf = Zipf::new(cfg.relations as f64, cfg.zipf_exponent)
        .map_err(|e| Error::Config(format!("invalid Zipf parameters: {e}")))?;
    let mut labels_per_doc: Vec<Vec<(usize, usize, usize)>> = vec![Vec::new(); n];
    let mut chosen = sample(rng, pair_index.len(), positives).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let (d, h, t) = pair_index[i];
        let r = zipf.sample(rng) as usize - 1;
        labels_per_doc[d].push((h, t, r));
    }

    let mut docs = Vec::with_capacity(n);
    for (d, (&k, triples)) in entity_counts.iter().zip(&labels_per_doc).enumerate() {
        let names: Vec<String> = sample(rng, name_pool, k)
            .into_iter()
            .map(|i| format!("ent{i}"))
            .collect();
        // (tokens, optional label index for evidence)
        let mut sentences: Vec<(Vec<String>, Option<usize>)> = Vec::new();
        for (li, &(h, t, r)) in triples.iter().enumerate() {
            let mut s = vec![filler(rng, cfg.vocab_size)];
            if rng.random_bool(0.5) {
                s.push(filler(rng, cfg.vocab_size));
            }
            s.push(names[h].clone());
            s.push(trigger(r, rng.random_range(0..2)));
            if rng.random_bool(0.5) {
                s.push(filler(rng, cfg.vocab_size));
            }
            s.push(names[t].clone());
            s.push(filler(rng, cfg.vocab_size));
            s.push(".".into());
            sentences.push((s, Some(li)));
        }
        for name in &names {
            for _ in 0..rng.random_range(1..=2) {
                let mut s = vec![filler(rng, cfg.vocab_size), name.clone()];
                for _ in 0..rng.random_range(1..=3) {
                    s.push(filler(rng, cfg.vocab_size));
                }
                s.push(".".into());
                sentences.push((s, None));
            }
        }
        for _ in 0..k / 2 {
            let a = rng.random_range(0..k);
            let b = (a + rng.random_range(1..k)) % k;
            let s = vec![
                filler(rng, cfg.vocab_size),
                names[a].clone(),
                filler(rng, cfg.vocab_size),
                names[b].clone(),
                filler(rng, cfg.vocab_size),
                ".".into(),
            ];
            sentences.push((s, None));
        }
        sentences.shuffle(rng);

        let mut vertex_set: Vec<Vec<Mention>> = vec![Vec::new(); k];
        let mut evidence = vec![Vec::new(); triples.len()];
        for (si, (toks, label)) in sentences.iter().enumerate() {
            if let Some(li) = label {
                evidence[*li].push(si);
            }
            for (wi, tok) in toks.iter().enumerate() {
                if let Some(e) = names.iter().position(|nm| nm == tok) {
                    vertex_set[e].push(Mention {
                        name: tok.clone(),
                        sent_id: si,
                        pos: [wi, wi + 1],
                        kind: "MISC".into(),
                    });
                }
            }
        }
        let labels = triples
            .iter()
            .zip(evidence)
            .map(|(&(h, t, r), ev)| Label {
                h,
                t,
                r: relation_id(r),
                evidence: ev,
            })
            .collect();
        docs.push(RawDocument {
            title: format!("synthetic-{tag}-{d:05}"),
            sents: sentences.into_iter().map(|(s, _)| s).collect(),
            vertex_set,
            labels,
        });
    }
    Ok(docs)
}
