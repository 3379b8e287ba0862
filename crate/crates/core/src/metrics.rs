//! Threshold selection and document-level relation extraction scores.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{RawDocument, RelationSchema};
use crate::error::{io_err, json_err, Error, Result};
use crate::model::{DocumentScores, PreparedDocument};

/// Frequency cut-offs of the rare-relation macro averages.
/// Largest double below 1.
const PROB_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

pub const MACRO_BUCKETS: [usize; 3] = [500, 200, 100];

/// One scored (document, head, tail, relation) candidate. NA is never a record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub doc: usize,
    pub h: usize,
    pub t: usize,
    /// Schema index of the relation.
    pub r: usize,
    pub prob: f64,
    pub gold: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub titles: Vec<String>,
    /// Mention names per entity per document.
    pub entity_names: Vec<Vec<Vec<String>>>,
    pub records: Vec<PredictionRecord>,
    /// Relation ids in schema order.
    pub relation_ids: Vec<String>,
}

impl PredictionSet {
    /// Flattens model outputs over all non-NA classes. Fails if the shapes
    /// disagree or a probability lies outside [0, 1].
    /// Probabilities that saturated to 0 or 1 are moved to the nearest
    /// representable value inside the open interval.
    pub fn from_scores(scores: &[DocumentScores], docs: &[PreparedDocument], schema: &RelationSchema) -> Result<Self> {
        if scores.len() != docs.len() {
            return Err(Error::Metric(format!("{} score sets for {} documents", scores.len(), docs.len())));
        }
        let positive = schema.len() - 1;
        let mut records = Vec::new();
        for (di, (s, d)) in scores.iter().zip(docs).enumerate() {
            if s.pairs != d.gold.pairs || s.classes < positive || s.probs.len() != s.pairs.len() * s.classes {
                return Err(Error::Metric(format!("scores do not match document {:?}", d.title)));
            }
            for (pi, &(h, t)) in s.pairs.iter().enumerate() {
                for r in 0..positive {
                    let prob = s.probs[pi * s.classes + r];
                    if !(0.0..=1.0).contains(&prob) {
                        return Err(Error::Metric(format!("probability {prob} outside [0, 1] in {:?}", d.title)));
                    }
                    // sigmoid saturates to exactly 0 or 1 in floating point
                    let prob = prob.clamp(f64::MIN_POSITIVE, PROB_MAX);
                    records.push(PredictionRecord {
                        doc: di,
                        h,
                        t,
                        r,
                        prob,
                        gold: d.gold.target(pi, r) == 1.0,
                    });
                }
            }
        }
        Ok(Self {
            titles: docs.iter().map(|d| d.title.clone()).collect(),
            entity_names: docs.iter().map(|d| d.entity_names.clone()).collect(),
            records,
            relation_ids: schema.positive_indices().map(|i| schema.get(i).id.clone()).collect(),
        })
    }

    pub fn gold_count(&self) -> usize {
        self.records.iter().filter(|r| r.gold).count()
    }

    fn in_train(&self, rec: &PredictionRecord, index: &TrainFactIndex) -> bool {
        let names = &self.entity_names[rec.doc];
        let rel = &self.relation_ids[rec.r];
        names[rec.h]
            .iter()
            .any(|a| names[rec.t].iter().any(|b| index.contains(a, b, rel)))
    }
}

/// Gold facts of the training split keyed by mention surface names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainFactIndex {
    facts: HashSet<(String, String, String)>,
}

impl TrainFactIndex {
    /// Every (head mention name, tail mention name, relation) of every gold label.
    pub fn from_documents(docs: &[RawDocument]) -> Self {
        let mut facts = HashSet::new();
        for d in docs {
            for l in &d.labels {
                for a in &d.vertex_set[l.h] {
                    for b in &d.vertex_set[l.t] {
                        facts.insert((a.name.clone(), b.name.clone(), l.r.clone()));
                    }
                }
            }
        }
        Self { facts }
    }

    pub fn contains(&self, head: &str, tail: &str, relation: &str) -> bool {
        self.facts
            .contains(&(head.to_string(), tail.to_string(), relation.to_string()))
    }

    pub fn len(&self) -> usize {
        self.facts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.facts.is_empty()
    }
}

/// `2PR / (P + R)` with 0/0 taken as 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Threshold over `{0} ∪ {p}` maximizing micro F1 of the rule `p > θ`;
/// ties go to the larger threshold. F1 values are compared exactly as
/// fractions `2·tp / (predicted + gold)`.
pub fn best_threshold(set: &PredictionSet) -> Result<f64> {
    if set.records.is_empty() {
        return Err(Error::Metric("cannot tune a threshold on an empty prediction set".into()));
    }
    let gold = set.gold_count();
    if gold == 0 {
        return Err(Error::Metric("F1 is undefined without gold positives".into()));
    }
    let mut sorted: Vec<(f64, bool)> = set.records.iter().map(|r| (r.prob, r.gold)).collect();
    sorted.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
    // (threshold, tp, predicted); start from the largest candidate, which predicts nothing.
    let mut best = (sorted[0].0, 0usize, 0usize);
    let better = |tp: usize, pred: usize, b: (f64, usize, usize)| (tp * (b.2 + gold)) > (b.1 * (pred + gold));
    let (mut tp, mut pred) = (0, 0);
    let mut i = 0;
    while i < sorted.len() {
        let p = sorted[i].0;
        // Candidate θ = p predicts exactly the records seen so far.
        if better(tp, pred, best) {
            best = (p, tp, pred);
        }
        while i < sorted.len() && sorted[i].0 == p {
            tp += sorted[i].1 as usize;
            pred += 1;
            i += 1;
        }
    }
    if better(tp, pred, best) {
        best = (0.0, tp, pred);
    }
    Ok(best.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MicroScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ign_precision: f64,
    pub ign_recall: f64,
    pub ign_f1: f64,
    pub predicted: usize,
    pub correct: usize,
    pub gold: usize,
}

/// Micro scores of `p > θ`, and the same after dropping every candidate whose
/// fact is already a training fact from both predictions and gold.
pub fn micro_scores(set: &PredictionSet, threshold: f64, train: &TrainFactIndex) -> MicroScores {
    let (mut pred, mut correct, mut gold) = (0, 0, 0);
    let (mut ipred, mut icorrect, mut igold) = (0, 0, 0);
    for r in &set.records {
        let p = r.prob > threshold;
        if !p && !r.gold {
            continue;
        }
        pred += p as usize;
        gold += r.gold as usize;
        correct += (p && r.gold) as usize;
        if !train.is_empty() && set.in_train(r, train) {
            continue;
        }
        ipred += p as usize;
        igold += r.gold as usize;
        icorrect += (p && r.gold) as usize;
    }
    let (precision, recall) = (ratio(correct, pred), ratio(correct, gold));
    let (ign_precision, ign_recall) = (ratio(icorrect, ipred), ratio(icorrect, igold));
    MicroScores {
        precision,
        recall,
        f1: f1(precision, recall),
        ign_precision,
        ign_recall,
        ign_f1: f1(ign_precision, ign_recall),
        predicted: pred,
        correct,
        gold,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationScore {
    pub id: String,
    pub train_frequency: usize,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroScores {
    pub macro_f1: f64,
    /// `(K, average over relations with train frequency < K)`; `None` when no relation qualifies.
    pub buckets: Vec<(usize, Option<f64>)>,
    pub per_relation: Vec<RelationScore>,
}

impl MacroScores {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.buckets.iter().find(|(b, _)| *b == k).and_then(|(_, v)| *v)
    }
}

/// Per-relation F1 averaged uniformly over all non-NA relations. Relations
/// with neither gold nor predicted triples count as F1 = 0.
pub fn macro_scores(set: &PredictionSet, threshold: f64, train_frequency: &[usize]) -> Result<MacroScores> {
    let n = set.relation_ids.len();
    if train_frequency.len() < n {
        return Err(Error::Metric(format!(
            "frequency table has {} entries for {n} relations",
            train_frequency.len()
        )));
    }
    let mut counts = vec![(0usize, 0usize, 0usize); n];
    for r in &set.records {
        let p = r.prob > threshold;
        let c = &mut counts[r.r];
        c.0 += r.gold as usize;
        c.1 += p as usize;
        c.2 += (p && r.gold) as usize;
    }
    let per_relation: Vec<RelationScore> = counts
        .iter()
        .enumerate()
        .map(|(i, &(gold, predicted, correct))| {
            let (precision, recall) = (ratio(correct, predicted), ratio(correct, gold));
            RelationScore {
                id: set.relation_ids[i].clone(),
                train_frequency: train_frequency[i],
                gold,
                predicted,
                correct,
                precision,
                recall,
                f1: f1(precision, recall),
            }
        })
        .collect();
    let mean = |sel: &dyn Fn(&RelationScore) -> bool| {
        let v: Vec<f64> = per_relation.iter().filter(|r| sel(r)).map(|r| r.f1).collect();
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    let macro_f1 = mean(&|_| true).unwrap_or(0.0);
    let buckets = MACRO_BUCKETS
        .iter()
        .map(|&k| (k, mean(&|r: &RelationScore| r.train_frequency < k)))
        .collect();
    Ok(MacroScores {
        macro_f1,
        buckets,
        per_relation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ign_f1: f64,
    #[serde(rename = "macro")]
    pub macro_f1: f64,
    pub macro_at_500: Option<f64>,
    pub macro_at_200: Option<f64>,
    pub macro_at_100: Option<f64>,
    pub per_relation: Vec<RelationScore>,
}

pub fn evaluate(
    set: &PredictionSet,
    threshold: f64,
    train: &TrainFactIndex,
    train_frequency: &[usize],
) -> Result<EvalReport> {
    let micro = micro_scores(set, threshold, train);
    let m = macro_scores(set, threshold, train_frequency)?;
    Ok(EvalReport {
        threshold,
        precision: micro.precision,
        recall: micro.recall,
        f1: micro.f1,
        ign_f1: micro.ign_f1,
        macro_f1: m.macro_f1,
        macro_at_500: m.at(500),
        macro_at_200: m.at(200),
        macro_at_100: m.at(100),
        per_relation: m.per_relation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub title: String,
    pub h_idx: usize,
    pub t_idx: usize,
    pub r: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub prob: Option<f64>,
}

/// Predicted triples (`p > θ`) as JSON lines; without probabilities when `strip_prob`.
pub fn write_predictions(path: impl AsRef<Path>, set: &PredictionSet, threshold: f64, strip_prob: bool) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    for r in set.records.iter().filter(|r| r.prob > threshold) {
        let line = PredictionLine {
            title: set.titles[r.doc].clone(),
            h_idx: r.h,
            t_idx: r.t,
            r: set.relation_ids[r.r].clone(),
            prob: (!strip_prob).then_some(r.prob),
        };
        serde_json::to_writer(&mut out, &line).map_err(json_err(path))?;
        out.write_all(b"\n").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionLine>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(json_err(path)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(records: &[(f64, bool)]) -> PredictionSet {
        PredictionSet {
            titles: vec!["d".into()],
            entity_names: vec![vec![vec!["a".into()], vec!["b".into()]]],
            records: records
                .iter()
                .enumerate()
                .map(|(i, &(prob, gold))| PredictionRecord {
                    doc: 0,
                    h: 0,
                    t: 1,
                    r: i % 2,
                    prob,
                    gold,
                })
                .collect(),
            relation_ids: vec!["P1".into(), "P2".into()],
        }
    }

    fn f1_at(s: &PredictionSet, theta: f64) -> f64 {
        micro_scores(s, theta, &TrainFactIndex::default()).f1
    }

    /// Every candidate scored independently; ties keep the larger threshold.
    fn sweep_oracle(s: &PredictionSet) -> (f64, f64) {
        let mut cands: Vec<f64> = s.records.iter().map(|r| r.prob).collect();
        cands.push(0.0);
        let mut best = (f64::NEG_INFINITY, -1.0);
        for &c in &cands {
            let f = f1_at(s, c);
            if f > best.1 + 1e-15 || ((f - best.1).abs() <= 1e-15 && c > best.0) {
                best = (c, f);
            }
        }
        best
    }

    #[test]
    fn separable_threshold_gives_perfect_f1() {
        let s = set(&[(0.9, true), (0.8, true), (0.3, false), (0.1, false), (0.2, false)]);
        let theta = best_threshold(&s).unwrap();
        assert!((0.3..0.8).contains(&theta));
        assert_eq!(f1_at(&s, theta), 1.0);
    }

    #[test]
    fn single_positive_record() {
        let s = set(&[(0.7, true)]);
        let theta = best_threshold(&s).unwrap();
        assert!(theta < 0.7);
        assert_eq!(f1_at(&s, theta), 1.0);
    }

    #[test]
    fn threshold_errors() {
        assert!(best_threshold(&set(&[])).is_err());
        assert!(best_threshold(&set(&[(0.4, false), (0.6, false)])).is_err());
    }

    #[test]
    fn hand_counted_micro_scores() {
        // 3 predicted (2 correct), 4 gold.
        let s = set(&[(0.9, true), (0.8, true), (0.7, false), (0.1, true), (0.2, true), (0.3, false)]);
        let m = micro_scores(&s, 0.5, &TrainFactIndex::default());
        assert_eq!((m.predicted, m.correct, m.gold), (3, 2, 4));
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.recall - 0.5).abs() < 1e-15);
        assert!((m.f1 - 4.0 / 7.0).abs() < 1e-15);
        assert_eq!(m.ign_f1, m.f1);
        let none = micro_scores(&s, 0.95, &TrainFactIndex::default());
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn ign_removes_training_facts_from_both_sides() {
        let mut s = set(&[(0.9, true), (0.8, true), (0.7, false), (0.1, true)]);
        s.entity_names[0].push(vec!["c".into(), "c2".into()]);
        s.records[2].t = 2;
        s.records[3].t = 2;
        let mut index = TrainFactIndex::default();
        index.facts.insert(("a".into(), "b".into(), "P1".into()));
        index.facts.insert(("a".into(), "c2".into(), "P2".into()));
        let m = micro_scores(&s, 0.5, &index);
        // Remaining: record 1 (predicted, gold) and record 2 (predicted, not gold).
        assert!((m.ign_precision - 0.5).abs() < 1e-15);
        assert_eq!(m.ign_recall, 1.0);
        assert!((m.ign_f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn macro_hand_cases() {
        let s = set(&[(0.9, true), (0.8, false)]);
        let m = macro_scores(&s, 0.5, &[600, 50]).unwrap();
        assert_eq!(m.macro_f1, 0.5);
        assert_eq!(m.at(500), Some(0.0));
        assert_eq!(m.at(100), Some(0.0));
        let m = macro_scores(&s, 0.5, &[600, 700]).unwrap();
        assert_eq!(m.at(500), None);
        assert_eq!(m.at(100), None);
        assert!(macro_scores(&s, 0.5, &[1]).is_err());
    }

    #[test]
    fn all_negative_predictions_collapse_macro() {
        let s = set(&[(0.1, true), (0.2, true), (0.3, false), (0.05, true)]);
        let m = macro_scores(&s, 0.5, &[10, 10]).unwrap();
        assert_eq!(m.macro_f1, 0.0);
        assert_eq!(m.at(100), Some(0.0));
    }

    #[test]
    fn prediction_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let s = set(&[(0.9, true), (0.2, false), (0.6, false)]);
        write_predictions(&path, &s, 0.5, false).unwrap();
        let lines = read_predictions(&path).unwrap();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].prob, Some(0.9));
        assert_eq!(lines[1].r, "P1");
        write_predictions(&path, &s, 0.5, true).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("prob"));
        assert_eq!(text.lines().next().unwrap(), r#"{"title":"d","h_idx":0,"t_idx":1,"r":"P1"}"#);
    }

    fn records() -> impl Strategy<Value = Vec<(f64, bool)>> {
        prop::collection::vec(((1u32..20).prop_map(|k| k as f64 / 20.0), any::<bool>()), 1..50)
            .prop_filter("needs a gold positive", |v| v.iter().any(|r| r.1))
    }

    proptest! {
        #[test]
        fn threshold_matches_exhaustive_sweep(r in records()) {
            let s = set(&r);
            let theta = best_threshold(&s).unwrap();
            let (otheta, of1) = sweep_oracle(&s);
            prop_assert!((f1_at(&s, theta) - of1).abs() < 1e-12);
            prop_assert_eq!(theta, otheta);
            for c in s.records.iter().map(|x| x.prob) {
                prop_assert!(f1_at(&s, c) <= f1_at(&s, theta) + 1e-12);
            }
        }

        #[test]
        fn raising_threshold_never_raises_recall(r in records(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let s = set(&r);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let idx = TrainFactIndex::default();
            prop_assert!(micro_scores(&s, hi, &idx).recall <= micro_scores(&s, lo, &idx).recall);
        }

        #[test]
        fn macro_buckets_are_nested(freq in prop::collection::vec(0usize..800, 2)) {
            let s = set(&[(0.9, true), (0.4, true)]);
            let m = macro_scores(&s, 0.5, &freq).unwrap();
            let members = |k: usize| m.per_relation.iter().filter(|r| r.train_frequency < k).count();
            prop_assert!(members(100) <= members(200) && members(200) <= members(500));
            prop_assert_eq!(m.at(100).is_some(), members(100) > 0);
        }
    }
}
