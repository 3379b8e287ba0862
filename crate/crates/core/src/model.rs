//! The full extractor: encoder, relation head and the parameters they share.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::corpus::{RawDocument, RelationSchema};
use crate::encoder::{chunk_document, tokenize_description, tokenize_with_markers, BoundEncoder, Encoder, EncoderConfig, TokenizedDocument, Vocabulary};
use crate::error::{Error, Result};
use crate::head::{BoundHead, GoldLabelMatrix, HeadConfig, PairOutputs, RelationHead};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()
    }
}

/// A document ready for the model: marked, chunked, with its targets.
#[derive(Debug, Clone)]
pub struct PreparedDocument {
    pub title: String,
    pub tokens: TokenizedDocument,
    pub gold: GoldLabelMatrix,
    /// Mention names per entity, used to match facts against the training set.
    pub entity_names: Vec<Vec<String>>,
}

impl PreparedDocument {
    pub fn num_pairs(&self) -> usize {
        self.gold.pairs.len()
    }
}

/// Per-document model outputs, row-major `pairs × classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentScores {
    pub title: String,
    pub pairs: Vec<(usize, usize)>,
    pub classes: usize,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BoundModel {
    pub encoder: BoundEncoder,
    pub head: BoundHead,
}

#[derive(Debug, Clone)]
pub struct DocReModel<S> {
    config: ModelConfig,
    vocab: Vocabulary,
    schema: RelationSchema,
    /// Tokenized description per scored class.
    descriptions: Vec<Vec<u32>>,
    encoder: Encoder,
    head: RelationHead,
    store: ParamStore<S>,
}

impl<S: Scalar> DocReModel<S> {
    pub fn new(config: ModelConfig, vocab: Vocabulary, schema: RelationSchema) -> Result<Self> {
        config.validate()?;
        let classes = if config.head.include_na { schema.len() } else { schema.len() - 1 };
        if classes == 0 {
            return Err(Error::Schema("no relation classes to score".into()));
        }
        let descriptions: Vec<Vec<u32>> = schema.relations()[..classes]
            .iter()
            .map(|r| tokenize_description(&r.description, &vocab))
            .collect();
        if let Some(d) = descriptions.iter().find(|d| d.len() > config.encoder.max_len) {
            return Err(Error::Config(format!(
                "relation description of {} tokens exceeds chunk length {}",
                d.len(),
                config.encoder.max_len
            )));
        }
        let mut store = ParamStore::new();
        let encoder = Encoder::register(&mut store, &config.encoder, vocab.len(), config.head.prism)?;
        let head = RelationHead::register(&mut store, &config.head, config.encoder.dim, classes, config.encoder.seed)?;
        Ok(Self {
            config,
            vocab,
            schema,
            descriptions,
            encoder,
            head,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn schema(&self) -> &RelationSchema {
        &self.schema
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn num_classes(&self) -> usize {
        self.head.classes()
    }

    pub fn prepare(&self, doc: &RawDocument) -> Result<PreparedDocument> {
        doc.validate(&self.schema)?;
        let tokens = chunk_document(tokenize_with_markers(doc, &self.vocab)?, self.config.encoder.max_len)?;
        let gold = GoldLabelMatrix::from_document(doc, &self.schema, self.config.head.include_na)?;
        let entity_names = doc
            .vertex_set
            .iter()
            .map(|e| e.iter().map(|m| m.name.clone()).collect())
            .collect();
        Ok(PreparedDocument {
            title: doc.title.clone(),
            tokens,
            gold,
            entity_names,
        })
    }

    pub fn prepare_all(&self, docs: &[RawDocument]) -> Result<Vec<PreparedDocument>> {
        docs.iter().map(|d| self.prepare(d)).collect()
    }

    pub fn bind(&self, g: &mut Graph<S>) -> Result<BoundModel> {
        Ok(BoundModel {
            encoder: self.encoder.bind(g, &self.store)?,
            head: self.head.bind(g, &self.store)?,
        })
    }

    /// Encodes every scored relation's description (C × dim), or `None` for the baseline head.
    pub fn relation_embeddings(
        &self,
        g: &mut Graph<S>,
        b: &BoundModel,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Option<Var>> {
        if !self.config.head.prism {
            return Ok(None);
        }
        Ok(Some(self.encoder.encode_relations(g, &b.encoder, &self.descriptions, dropout)?))
    }

    /// Scores every ordered pair of `doc`. The document must have at least one pair.
    pub fn forward_document(
        &self,
        g: &mut Graph<S>,
        b: &BoundModel,
        doc: &PreparedDocument,
        relations: Option<Var>,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<PairOutputs> {
        let tokens = self.encoder.encode(g, &b.encoder, &doc.tokens, dropout)?;
        self.head
            .forward(g, &b.head, tokens, &doc.tokens.mentions, &doc.gold.pairs, relations)
    }

    /// Training loss over a batch sharing one graph: each document's mean
    /// BCE weighted by its share of the batch's coordinates. Documents without
    /// pairs contribute nothing; `None` if no document has any.
    pub fn batch_loss(
        &self,
        g: &mut Graph<S>,
        docs: &[&PreparedDocument],
        mut dropout: Option<&mut ChaCha8Rng>,
        relation_dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Option<Var>> {
        let total: usize = docs.iter().map(|d| d.gold.len()).sum();
        if total == 0 {
            return Ok(None);
        }
        let b = self.bind(g)?;
        let relations = self.relation_embeddings(g, &b, relation_dropout)?;
        let mut loss: Option<Var> = None;
        for doc in docs.iter().filter(|d| !d.gold.is_empty()) {
            let out = self.forward_document(g, &b, doc, relations, dropout.as_deref_mut())?;
            let l = self.head.loss(g, out.probs, &doc.gold)?;
            let l = if doc.gold.len() == total {
                l
            } else {
                g.scale(l, S::lit(doc.gold.len() as f64 / total as f64))?
            };
            loss = Some(match loss {
                Some(acc) => g.add(acc, l)?,
                None => l,
            });
        }
        Ok(loss)
    }

    /// Inference without dropout. The relation table is encoded once and
    /// shared by all documents; `jobs` worker threads split the documents.
    pub fn predict(&self, docs: &[PreparedDocument], jobs: usize) -> Result<Vec<DocumentScores>> {
        let relations = if self.config.head.prism {
            let mut g = Graph::new();
            let b = self.bind(&mut g)?;
            let r = self.relation_embeddings(&mut g, &b, None)?.expect("adaptive head");
            Some(g.value(r).clone())
        } else {
            None
        };
        let run = |doc: &PreparedDocument| -> Result<DocumentScores> {
            let mut out = DocumentScores {
                title: doc.title.clone(),
                pairs: doc.gold.pairs.clone(),
                classes: doc.gold.classes,
                logits: Vec::new(),
                probs: Vec::new(),
                targets: doc.gold.targets.clone(),
            };
            if doc.gold.is_empty() {
                return Ok(out);
            }
            let mut g = Graph::new();
            let b = self.bind(&mut g)?;
            let rel = relations.clone().map(|t| g.constant(t)).transpose()?;
            let res = self.forward_document(&mut g, &b, doc, rel, None)?;
            out.logits = g.value(res.logits).data().iter().map(|v| v.as_f64()).collect();
            out.probs = g.value(res.probs).data().iter().map(|v| v.as_f64()).collect();
            Ok(out)
        };
        let jobs = jobs.max(1).min(docs.len().max(1));
        if jobs == 1 {
            return docs.iter().map(run).collect();
        }
        let per = docs.len().div_ceil(jobs);
        std::thread::scope(|scope| {
            let handles: Vec<_> = docs
                .chunks(per)
                .map(|part| scope.spawn(move || part.iter().map(run).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::with_capacity(docs.len());
            for h in handles {
                all.extend(h.join().expect("prediction worker panicked")?);
            }
            Ok(all)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticConfig};
    use rand::{Rng, SeedableRng};

    fn corpus() -> crate::corpus::SyntheticCorpus {
        generate_synthetic(&SyntheticConfig {
            documents: 4,
            dev_documents: 2,
            test_documents: 2,
            vocab_size: 20,
            relations: 3,
            na_ratio: 0.6,
            mean_entities: 4.0,
            ..SyntheticConfig::default()
        })
        .unwrap()
    }

    fn model(prism: bool, lambda: f64, layers: usize) -> (DocReModel<f64>, Vec<PreparedDocument>) {
        let c = corpus();
        let vocab = Vocabulary::build(&c.train, Some(&c.schema));
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                layers,
                dropout: 0.0,
                ..EncoderConfig::default()
            },
            head: HeadConfig {
                prism,
                lambda,
                ..HeadConfig::default()
            },
        };
        let m = DocReModel::new(cfg, vocab, c.schema.clone()).unwrap();
        let docs = m.prepare_all(&c.train).unwrap();
        (m, docs)
    }

    #[test]
    fn lambda_zero_matches_baseline_bitwise() {
        let (base, docs) = model(false, 10.0, 1);
        let (zero, _) = model(true, 0.0, 1);
        for p in base.store().iter() {
            let q = zero.store().id(&p.name).map(|id| zero.store().get(id)).unwrap();
            assert_eq!(p.value, q.value, "{}", p.name);
        }
        let a = base.predict(&docs, 1).unwrap();
        let b = zero.predict(&docs, 1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.probs, y.probs);
        }
    }

    #[test]
    fn parallel_prediction_matches_serial() {
        let (m, docs) = model(true, 10.0, 1);
        assert_eq!(m.predict(&docs, 1).unwrap(), m.predict(&docs, 3).unwrap());
    }

    #[test]
    fn probabilities_and_shapes() {
        let (m, docs) = model(true, 10.0, 2);
        for (s, d) in m.predict(&docs, 1).unwrap().iter().zip(&docs) {
            assert_eq!(s.probs.len(), d.num_pairs() * m.num_classes());
            assert!(s.probs.iter().all(|&p| p > 0.0 && p < 1.0));
            for (l, p) in s.logits.iter().zip(&s.probs) {
                assert!((1.0 / (1.0 + (-l).exp()) - p).abs() < 1e-12);
            }
        }
    }

    /// Central differences on a sample of entries from every parameter tensor.
    #[test]
    fn end_to_end_gradient_check() {
        let (mut m, docs) = model(true, 10.0, 2);
        let batch: Vec<&PreparedDocument> = docs.iter().take(2).collect();
        let loss_of = |m: &DocReModel<f64>| {
            let mut g = Graph::new();
            let l = m.batch_loss(&mut g, &batch, None, None).unwrap().unwrap();
            g.value(l).item()
        };
        m.store_mut().zero_grads();
        let mut g = Graph::new();
        let l = m.batch_loss(&mut g, &batch, None, None).unwrap().unwrap();
        let mut store = std::mem::take(m.store_mut());
        g.backward(l, &mut store).unwrap();
        *m.store_mut() = store;

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        let ids: Vec<_> = m.store().ids().collect();
        for id in ids {
            let n = m.store().get(id).value.len();
            // Embedding rows for unused tokens have zero gradient; prefer entries that matter.
            let nonzero: Vec<usize> = (0..n).filter(|&k| m.store().get(id).grad.data()[k] != 0.0).collect();
            let pool = if nonzero.is_empty() { (0..n).collect() } else { nonzero };
            for _ in 0..4 {
                let k = pool[rng.random_range(0..pool.len())];
                let orig = m.store().get(id).value.data()[k];
                let analytic = m.store().get(id).grad.data()[k];
                m.store_mut().get_mut(id).value.data_mut()[k] = orig + h;
                let plus = loss_of(&m);
                m.store_mut().get_mut(id).value.data_mut()[k] = orig - h;
                let minus = loss_of(&m);
                m.store_mut().get_mut(id).value.data_mut()[k] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let denom = analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max((analytic - numeric).abs() / denom);
                checked += 1;
            }
        }
        assert!(checked > 100);
        assert!(worst < 1e-3, "relative error {worst}");
    }
}
