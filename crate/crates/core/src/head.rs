//! Entity pooling, head/tail projection, bilinear relation scores and the
//! pair-relation similarity scores that adapt them.
//!
//! For an ordered entity pair `(h, t)` and relation `r` the head computes
//!
//! ```text
//! s_r  = z_hᵀ W_r z_t + b_r                     (statistical score)
//! s'_r = cos(tanh(W_p [z_h ; z_t] + b_p), z_r)  (adaptive score)
//! P_r  = σ(s_r + λ s'_r)
//! ```
//!
//! where `z_h`, `z_t` are tanh projections of logsumexp-pooled mention
//! embeddings and `z_r` is the encoded description of `r`. With adaptation
//! disabled (or `λ = 0`) the probabilities are exactly `σ(s_r)`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::corpus::{RawDocument, RelationSchema};
use crate::encoder::{affine, uniform, xavier, MentionSpan};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    /// Width of the head/tail projections.
    pub hidden: usize,
    /// Scale of the adaptive score.
    pub lambda: f64,
    /// Adds the pair-relation similarity term.
    pub prism: bool,
    /// Keeps NA as a scored class with its own bilinear row and target.
    pub include_na: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            lambda: 10.0,
            prism: true,
            include_na: true,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("head hidden size must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Head,
    Tail,
}

/// Binary targets for every ordered pair `h ≠ t` and every scored class.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldLabelMatrix {
    pub pairs: Vec<(usize, usize)>,
    pub classes: usize,
    /// Row-major `pairs × classes`.
    pub targets: Vec<f64>,
}

impl GoldLabelMatrix {
    /// Schema indices map to classes directly; when NA is scored it is the
    /// last class and is 1 exactly for pairs without any gold relation.
    pub fn from_document(doc: &RawDocument, schema: &RelationSchema, include_na: bool) -> Result<Self> {
        let n = doc.num_entities();
        let classes = if include_na { schema.len() } else { schema.len() - 1 };
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|h| (0..n).filter(move |&t| t != h).map(move |t| (h, t)))
            .collect();
        let mut targets = vec![0.0; pairs.len() * classes];
        let row = |h: usize, t: usize| h * (n - 1) + if t > h { t - 1 } else { t };
        for l in &doc.labels {
            let r = schema.index_of(&l.r).ok_or_else(|| Error::Ingest {
                doc: doc.title.clone(),
                message: format!("unknown relation {:?}", l.r),
            })?;
            if l.h == l.t || l.h >= n || l.t >= n {
                return Err(Error::Ingest {
                    doc: doc.title.clone(),
                    message: format!("invalid label pair ({}, {})", l.h, l.t),
                });
            }
            targets[row(l.h, l.t) * classes + r] = 1.0;
        }
        if include_na {
            let na = classes - 1;
            for p in 0..pairs.len() {
                let any = targets[p * classes..p * classes + na].iter().any(|&y| y == 1.0);
                targets[p * classes + na] = if any { 0.0 } else { 1.0 };
            }
        }
        Ok(Self {
            pairs,
            classes,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn target(&self, pair: usize, class: usize) -> f64 {
        self.targets[pair * self.classes + class]
    }
}

/// Graph nodes produced for one document.
#[derive(Debug, Clone, Copy)]
pub struct PairOutputs {
    /// P × C bilinear scores.
    pub statistical: Var,
    /// P × C cosine scores, when adaptation is on.
    pub adaptive: Option<Var>,
    pub logits: Var,
    pub probs: Var,
}

#[derive(Debug, Clone)]
pub struct RelationHead {
    cfg: HeadConfig,
    classes: usize,
    head: (ParamId, ParamId),
    tail: (ParamId, ParamId),
    bilinear: (ParamId, ParamId),
    pair: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone, Copy)]
pub struct BoundHead {
    head: (Var, Var),
    tail: (Var, Var),
    bilinear: (Var, Var),
    pair: Option<(Var, Var)>,
}

impl RelationHead {
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: &HeadConfig,
        input_dim: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.hidden;
        let mut linear = |name: &str, i: usize, o: usize| -> Result<(ParamId, ParamId)> {
            let w = store.add(format!("{name}.weight"), xavier(seed, &format!("{name}.weight"), i, o))?;
            let b = store.add(format!("{name}.bias"), Tensor::zeros(&[o]))?;
            Ok((w, b))
        };
        let head = linear("head.head_proj", input_dim, k)?;
        let tail = linear("head.tail_proj", input_dim, k)?;
        let pair = if cfg.prism {
            Some(linear("head.pair_proj", 2 * k, input_dim)?)
        } else {
            None
        };
        // Keeps initial zᵀWz at O(1) for tanh-bounded inputs of width k.
        let a = 3f64.sqrt() / k as f64;
        let w = store.add("head.bilinear.weight", uniform(seed, "head.bilinear.weight", &[classes, k, k], a))?;
        let b = store.add("head.bilinear.bias", Tensor::zeros(&[classes]))?;
        Ok(Self {
            cfg: cfg.clone(),
            classes,
            head,
            tail,
            bilinear: (w, b),
            pair,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.cfg
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn bind<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>) -> Result<BoundHead> {
        let mut pair = |(a, b): (ParamId, ParamId)| -> Result<(Var, Var)> { Ok((g.param(store, a)?, g.param(store, b)?)) };
        Ok(BoundHead {
            head: pair(self.head)?,
            tail: pair(self.tail)?,
            bilinear: pair(self.bilinear)?,
            pair: self.pair.map(&mut pair).transpose()?,
        })
    }

    /// Entity embedding: logsumexp over the embeddings at its mentions' opening markers.
    pub fn pool_entity<S: Scalar>(&self, g: &mut Graph<S>, tokens: Var, mentions: &[MentionSpan]) -> Result<Var> {
        if mentions.is_empty() {
            return Err(Error::EmptyPool);
        }
        let idx: Vec<usize> = mentions.iter().map(|m| m.marker).collect();
        let rows = g.gather_rows(tokens, &idx)?;
        g.logsumexp_rows(rows)
    }

    /// `tanh(x W + b)` with role-specific parameters; `x` is n × input_dim.
    pub fn project<S: Scalar>(&self, g: &mut Graph<S>, p: &BoundHead, x: Var, role: Role) -> Result<Var> {
        let lin = match role {
            Role::Head => p.head,
            Role::Tail => p.tail,
        };
        let y = affine(g, x, lin)?;
        g.tanh(y)
    }

    pub fn bilinear_score<S: Scalar>(&self, g: &mut Graph<S>, p: &BoundHead, zh: Var, zt: Var) -> Result<Var> {
        g.bilinear(zh, zt, p.bilinear.0, p.bilinear.1)
    }

    /// `tanh(W [z_h ; z_t] + b)` per pair row.
    pub fn pair_representation<S: Scalar>(&self, g: &mut Graph<S>, p: &BoundHead, zh: Var, zt: Var) -> Result<Var> {
        let lin = p
            .pair
            .ok_or_else(|| Error::Config("pair representation requires the adaptive head".into()))?;
        let cat = g.concat_cols(&[zh, zt])?;
        let y = affine(g, cat, lin)?;
        g.tanh(y)
    }

    /// Cosine similarity of each pair row with each relation embedding row.
    pub fn adaptive_scores<S: Scalar>(&self, g: &mut Graph<S>, pair_repr: Var, relations: Var) -> Result<Var> {
        g.cosine_matrix(pair_repr, relations)
    }

    /// Returns `(s + λ s', σ(s + λ s'))`, or `(s, σ(s))` without an adaptive term.
    pub fn combine<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        statistical: Var,
        adaptive: Option<Var>,
        lambda: f64,
    ) -> Result<(Var, Var)> {
        let logits = match adaptive {
            Some(a) => {
                let scaled = g.scale(a, S::lit(lambda))?;
                g.add(statistical, scaled)?
            }
            None => statistical,
        };
        let probs = g.sigmoid(logits)?;
        Ok((logits, probs))
    }

    /// Mean BCE over every pair-class coordinate.
    pub fn loss<S: Scalar>(&self, g: &mut Graph<S>, probs: Var, gold: &GoldLabelMatrix) -> Result<Var> {
        let targets: Vec<S> = gold.targets.iter().map(|&y| S::lit(y)).collect();
        g.bce_mean(probs, &targets)
    }

    /// Scores every ordered pair of `entities` (mention lists) given token
    /// embeddings and, for the adaptive head, the relation embedding table.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &BoundHead,
        tokens: Var,
        entities: &[Vec<MentionSpan>],
        pairs: &[(usize, usize)],
        relations: Option<Var>,
    ) -> Result<PairOutputs> {
        let mut pooled = Vec::with_capacity(entities.len());
        for m in entities {
            pooled.push(self.pool_entity(g, tokens, m)?);
        }
        let ents = g.concat_rows(&pooled)?;
        let zh_all = self.project(g, p, ents, Role::Head)?;
        let zt_all = self.project(g, p, ents, Role::Tail)?;
        let hs: Vec<usize> = pairs.iter().map(|&(h, _)| h).collect();
        let ts: Vec<usize> = pairs.iter().map(|&(_, t)| t).collect();
        let zh = g.gather_rows(zh_all, &hs)?;
        let zt = g.gather_rows(zt_all, &ts)?;
        let statistical = self.bilinear_score(g, p, zh, zt)?;
        let adaptive = if self.cfg.prism {
            let rel = relations.ok_or_else(|| Error::Config("adaptive head needs relation embeddings".into()))?;
            let zp = self.pair_representation(g, p, zh, zt)?;
            Some(self.adaptive_scores(g, zp, rel)?)
        } else {
            None
        };
        let (logits, probs) = self.combine(g, statistical, adaptive, self.cfg.lambda)?;
        Ok(PairOutputs {
            statistical,
            adaptive,
            logits,
            probs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::max_rel_error;
    use crate::autodiff::{bce, sigmoid_scalar};
    use crate::corpus::{Label, Mention, RelationDef};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn head(input: usize, hidden: usize, classes: usize, prism: bool) -> (ParamStore<f64>, RelationHead) {
        let mut store = ParamStore::new();
        let cfg = HeadConfig {
            hidden,
            prism,
            ..HeadConfig::default()
        };
        let h = RelationHead::register(&mut store, &cfg, input, classes, 7).unwrap();
        (store, h)
    }

    fn set(store: &mut ParamStore<f64>, name: &str, value: f64) {
        let id = store.id(name).unwrap();
        store.get_mut(id).value.data_mut().fill(value);
    }

    fn span(marker: usize) -> MentionSpan {
        MentionSpan {
            marker,
            span: (marker, marker + 3),
        }
    }

    #[test]
    fn pooling_single_and_repeated_mentions() {
        let (_, h) = head(3, 2, 2, false);
        let mut g = Graph::<f64>::new();
        let rows = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![0.5, -1.0, 2.0], vec![9.0, 9.0, 9.0]]).unwrap();
        let x = g.constant(rows).unwrap();
        let one = h.pool_entity(&mut g, x, &[span(2)]).unwrap();
        assert_eq!(g.value(one).data(), &[9.0, 9.0, 9.0]);
        let two = h.pool_entity(&mut g, x, &[span(0), span(1)]).unwrap();
        for (a, b) in g.value(two).data().iter().zip([0.5, -1.0, 2.0]) {
            assert!((a - (b + 2f64.ln())).abs() < 1e-12);
        }
        assert!(matches!(h.pool_entity(&mut g, x, &[]), Err(Error::EmptyPool)));
    }

    #[test]
    fn zero_projection_is_zero_and_roles_differ() {
        let (mut store, h) = head(4, 3, 2, true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let b = h.bind(&mut g, &store).unwrap();
        let x = g.constant(random(&[2, 4], &mut rng)).unwrap();
        let zh = h.project(&mut g, &b, x, Role::Head).unwrap();
        let zt = h.project(&mut g, &b, x, Role::Tail).unwrap();
        assert_ne!(g.value(zh).data(), g.value(zt).data());
        assert!(g.value(zh).data().iter().all(|v| v.abs() < 1.0));
        set(&mut store, "head.head_proj.weight", 0.0);
        let mut g = Graph::new();
        let b = h.bind(&mut g, &store).unwrap();
        let x = g.constant(random(&[2, 4], &mut rng)).unwrap();
        let zh = h.project(&mut g, &b, x, Role::Head).unwrap();
        assert!(g.value(zh).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bilinear_matches_double_loop() {
        let (k, c, p) = (5, 4, 6);
        let (store, h) = head(3, k, c, false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let zh_t = random(&[p, k], &mut rng);
        let zt_t = random(&[p, k], &mut rng);
        let mut g = Graph::new();
        let b = h.bind(&mut g, &store).unwrap();
        let zh = g.constant(zh_t.clone()).unwrap();
        let zt = g.constant(zt_t.clone()).unwrap();
        let s = h.bilinear_score(&mut g, &b, zh, zt).unwrap();
        let w = &store.get(store.id("head.bilinear.weight").unwrap()).value;
        let bias = &store.get(store.id("head.bilinear.bias").unwrap()).value;
        for pi in 0..p {
            for r in 0..c {
                let mut acc = bias.data()[r];
                for i in 0..k {
                    for j in 0..k {
                        acc += zh_t.at(pi, i) * w.data()[r * k * k + i * k + j] * zt_t.at(pi, j);
                    }
                }
                assert!((g.value(s).at(pi, r) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_constant_and_identity_forms() {
        let (mut store, h) = head(3, 3, 2, false);
        set(&mut store, "head.bilinear.weight", 0.0);
        set(&mut store, "head.bilinear.bias", 0.25);
        let mut g = Graph::new();
        let b = h.bind(&mut g, &store).unwrap();
        let z = g.constant(Tensor::from_rows(&[vec![0.3, -0.2, 0.9]]).unwrap()).unwrap();
        let s = h.bilinear_score(&mut g, &b, z, z).unwrap();
        assert_eq!(g.value(s).data(), &[0.25, 0.25]);

        set(&mut store, "head.bilinear.bias", 0.0);
        let id = store.id("head.bilinear.weight").unwrap();
        for r in 0..2 {
            for i in 0..3 {
                store.get_mut(id).value.data_mut()[r * 9 + i * 3 + i] = 1.0;
            }
        }
        let mut g = Graph::new();
        let b = h.bind(&mut g, &store).unwrap();
        let zh = g.constant(Tensor::from_rows(&[vec![0.3, -0.2, 0.9]]).unwrap()).unwrap();
        let zt = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, -1.0]]).unwrap()).unwrap();
        let s = h.bilinear_score(&mut g, &b, zh, zt).unwrap();
        let dot = 0.3 - 0.4 - 0.9;
        assert!(g.value(s).data().iter().all(|v| (v - dot).abs() < 1e-15));
    }

    #[test]
    fn pair_representation_is_ordered() {
        let (mut store, h) = head(3, 2, 2, true);
        let mut g = Graph::new();
        let b = h.bind(&mut g, &store).unwrap();
        let a = g.constant(Tensor::from_rows(&[vec![0.5, -0.1]]).unwrap()).unwrap();
        let c = g.constant(Tensor::from_rows(&[vec![-0.3, 0.7]]).unwrap()).unwrap();
        let ac = h.pair_representation(&mut g, &b, a, c).unwrap();
        let ca = h.pair_representation(&mut g, &b, c, a).unwrap();
        assert_ne!(g.value(ac).data(), g.value(ca).data());

        set(&mut store, "head.pair_proj.weight", 0.0);
        let mut g = Graph::new();
        let b = h.bind(&mut g, &store).unwrap();
        let a = g.constant(Tensor::from_rows(&[vec![0.5, -0.1]]).unwrap()).unwrap();
        let z = h.pair_representation(&mut g, &b, a, a).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pair_representation_requires_adaptive_head() {
        let (store, h) = head(3, 2, 2, false);
        let mut g = Graph::new();
        let b = h.bind(&mut g, &store).unwrap();
        let a = g.constant(Tensor::from_rows(&[vec![0.5, -0.1]]).unwrap()).unwrap();
        assert!(h.pair_representation(&mut g, &b, a, a).is_err());
    }

    #[test]
    fn adaptive_scores_hand_cases() {
        let (_, h) = head(3, 2, 2, true);
        let mut g = Graph::<f64>::new();
        let rel = g
            .constant(Tensor::from_rows(&[vec![1.0, 2.0, 0.0], vec![0.0, 0.0, 3.0]]).unwrap())
            .unwrap();
        let z = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 0.0]]).unwrap()).unwrap();
        let s = h.adaptive_scores(&mut g, z, rel).unwrap();
        assert!((g.value(s).at(0, 0) - 1.0).abs() < 1e-15);
        assert_eq!(g.value(s).at(0, 1), 0.0);
        let orth = g.constant(Tensor::from_rows(&[vec![2.0, -1.0, 0.0]]).unwrap()).unwrap();
        let rel1 = g.constant(Tensor::from_rows(&[vec![1.0, 2.0, 0.0]]).unwrap()).unwrap();
        let s = h.adaptive_scores(&mut g, orth, rel1).unwrap();
        assert_eq!(g.value(s).data(), &[0.0]);
    }

    #[test]
    fn adaptive_scores_bounded_over_random_trials() {
        let (_, h) = head(3, 2, 2, true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let mut g = Graph::new();
            let z = g.constant(random(&[1, 6], &mut rng).map(|v| v * 50.0)).unwrap();
            let r = g.constant(random(&[5, 6], &mut rng)).unwrap();
            let s = h.adaptive_scores(&mut g, z, r).unwrap();
            worst = g.value(s).data().iter().fold(worst, |m, v| m.max(v.abs()));
        }
        assert!(worst <= 1.0);
    }

    #[test]
    fn combine_cases() {
        let (_, h) = head(3, 2, 3, true);
        let mut g = Graph::<f64>::new();
        let s = g.constant(Tensor::vector(vec![2.0, 0.0, -1.5])).unwrap();
        let a = g.constant(Tensor::vector(vec![-0.3, 0.0, 0.8])).unwrap();
        let (_, base) = h.combine(&mut g, s, None, 10.0).unwrap();
        let (_, zero) = h.combine(&mut g, s, Some(a), 0.0).unwrap();
        assert_eq!(g.value(base).data(), g.value(zero).data());
        let (logits, p) = h.combine(&mut g, s, Some(a), 10.0).unwrap();
        assert!((g.value(logits).data()[0] + 1.0).abs() < 1e-12);
        assert!((g.value(p).data()[0] - 0.2689414213699951).abs() < 1e-12);
        assert_eq!(g.value(p).data()[1], 0.5);
    }

    #[test]
    fn loss_hand_cases() {
        let (_, h) = head(3, 2, 2, false);
        let gold = GoldLabelMatrix {
            pairs: vec![(0, 1), (1, 0)],
            classes: 2,
            targets: vec![1.0, 0.0, 0.0, 1.0],
        };
        let mut g = Graph::<f64>::new();
        let half = g.constant(Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap()).unwrap();
        let l = h.loss(&mut g, half, &gold).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);

        let probs = [0.9, 0.2, 0.4, 0.7];
        let p = g.constant(Tensor::new(vec![2, 2], probs.to_vec()).unwrap()).unwrap();
        let l = h.loss(&mut g, p, &gold).unwrap();
        let want = (-(0.9f64.ln()) - 0.8f64.ln() - 0.6f64.ln() - 0.7f64.ln()) / 4.0;
        assert!((g.value(l).item() - want).abs() < 1e-12);

        let exact = g.constant(Tensor::new(vec![2, 2], gold.targets.clone()).unwrap()).unwrap();
        let l = h.loss(&mut g, exact, &gold).unwrap();
        assert!(g.value(l).item() < 1e-11);
    }

    fn schema() -> RelationSchema {
        let def = |id: &str| RelationDef {
            id: id.into(),
            name: id.into(),
            description: format!("{id} holds"),
        };
        RelationSchema::new(vec![def("P1"), def("P2")]).unwrap()
    }

    fn doc(labels: Vec<Label>) -> RawDocument {
        let m = |i: usize| Mention {
            name: format!("e{i}"),
            sent_id: 0,
            pos: [i, i + 1],
            kind: String::new(),
        };
        RawDocument {
            title: "d".into(),
            sents: vec![vec!["a".into(), "b".into(), "c".into()]],
            vertex_set: vec![vec![m(0)], vec![m(1)], vec![m(2)]],
            labels,
        }
    }

    fn label(h: usize, t: usize, r: &str) -> Label {
        Label {
            h,
            t,
            r: r.into(),
            evidence: vec![],
        }
    }

    #[test]
    fn gold_matrix_na_exclusivity() {
        let schema = schema();
        let d = doc(vec![label(0, 1, "P1"), label(0, 1, "P2"), label(2, 0, "P2")]);
        let gold = GoldLabelMatrix::from_document(&d, &schema, true).unwrap();
        assert_eq!(gold.pairs.len(), 6);
        assert_eq!(gold.classes, 3);
        assert!(gold.pairs.iter().all(|&(h, t)| h != t));
        for (i, &(h, t)) in gold.pairs.iter().enumerate() {
            let pos: f64 = (0..2).map(|r| gold.target(i, r)).sum();
            assert_eq!(gold.target(i, 2) == 1.0, pos == 0.0);
            match (h, t) {
                (0, 1) => assert_eq!(pos, 2.0),
                (2, 0) => assert_eq!(gold.target(i, 1), 1.0),
                _ => assert_eq!(pos, 0.0),
            }
        }
        let no_na = GoldLabelMatrix::from_document(&d, &schema, false).unwrap();
        assert_eq!(no_na.classes, 2);
        assert!(GoldLabelMatrix::from_document(&doc(vec![label(0, 1, "P9")]), &schema, true).is_err());
    }

    #[test]
    fn projection_and_pair_gradients() {
        let (mut store, h) = head(4, 3, 2, true);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[3, 4], &mut rng);
        let err = max_rel_error(&mut store, 1e-6, 1e-7, |g, s| {
            let b = h.bind(g, s)?;
            let x = g.constant(x.clone())?;
            let zh = h.project(g, &b, x, Role::Head)?;
            let zt = h.project(g, &b, x, Role::Tail)?;
            let zp = h.pair_representation(g, &b, zh, zt)?;
            let q = g.mul(zp, zp)?;
            let w = g.sum(q)?;
            let s = h.bilinear_score(g, &b, zh, zt)?;
            let v = g.sum(s)?;
            g.add(w, v)
        });
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn head_forward_gradient() {
        let (mut store, h) = head(4, 3, 3, true);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tokens = random(&[8, 4], &mut rng);
        let rel = random(&[3, 4], &mut rng);
        let ents = vec![vec![span(0), span(3)], vec![span(5)], vec![span(1), span(6), span(7)]];
        let pairs = vec![(0, 1), (1, 0), (0, 2), (2, 1)];
        let gold = GoldLabelMatrix {
            pairs: pairs.clone(),
            classes: 3,
            targets: vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        };
        let err = max_rel_error(&mut store, 1e-6, 1e-7, |g, s| {
            let b = h.bind(g, s)?;
            let t = g.constant(tokens.clone())?;
            let r = g.constant(rel.clone())?;
            let out = h.forward(g, &b, t, &ents, &pairs, Some(r))?;
            h.loss(g, out.probs, &gold)
        });
        assert!(err < 1e-4, "relative error {err}");
    }

    proptest! {
        #[test]
        fn adaptation_is_bounded_by_lambda(
            s in prop::collection::vec(-8.0f64..8.0, 4),
            a in prop::collection::vec(-1.0f64..1.0, 4),
            lambda in 0.0f64..20.0,
        ) {
            let (_, h) = head(2, 2, 4, true);
            let mut g = Graph::<f64>::new();
            let sv = g.constant(Tensor::vector(s.clone())).unwrap();
            let av = g.constant(Tensor::vector(a)).unwrap();
            let (logits, p) = h.combine(&mut g, sv, Some(av), lambda).unwrap();
            for i in 0..4 {
                prop_assert!((g.value(logits).data()[i] - s[i]).abs() <= lambda + 1e-12);
                let pi = g.value(p).data()[i];
                prop_assert!(pi > 0.0 && pi < 1.0);
            }
        }

        #[test]
        fn probability_increases_with_adaptive_score(
            s in -3.0f64..3.0,
            a in -1.0f64..0.9,
            step in 0.01f64..0.1,
            lambda in 0.1f64..10.0,
        ) {
            let p = |x: f64| sigmoid_scalar(s + lambda * x);
            prop_assert!(p(a + step) > p(a));
            let (_, h) = head(2, 2, 1, true);
            let mut g = Graph::<f64>::new();
            let sv = g.constant(Tensor::vector(vec![s, s])).unwrap();
            let av = g.constant(Tensor::vector(vec![a, a + step])).unwrap();
            let (_, pv) = h.combine(&mut g, sv, Some(av), lambda).unwrap();
            prop_assert!(g.value(pv).data()[1] > g.value(pv).data()[0]);
            prop_assert!(bce(g.value(pv).data()[1], 1.0) < bce(g.value(pv).data()[0], 1.0));
        }
    }
}
