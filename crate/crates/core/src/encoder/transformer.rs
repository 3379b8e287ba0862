use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tokenize::TokenizedDocument;
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::named_stream;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Chunk length; also the number of learned positions.
    pub max_len: usize,
    pub dropout: f64,
    /// Attention scores get a learned per-head bias for each relative offset
    /// in `[-w, w]` (larger offsets share the end buckets); 0 disables it.
    pub relative_window: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            layers: 2,
            heads: 4,
            ff_dim: 64,
            max_len: 512,
            dropout: 0.1,
            relative_window: 8,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dim == 0 || self.heads == 0 || self.ff_dim == 0 {
            return bad("encoder dim, heads and ff_dim must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return bad(format!("encoder dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.max_len < 8 {
            return bad(format!("chunk length must be >= 8, got {}", self.max_len));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// Which token embedding table a sequence is looked up in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenTable {
    Document,
    Relation,
}

#[derive(Debug, Clone)]
struct Layer {
    ln1: (ParamId, ParamId),
    q: (ParamId, ParamId),
    k: (ParamId, ParamId),
    v: (ParamId, ParamId),
    o: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
    rel_bias: Option<ParamId>,
}

/// Pre-norm transformer stack with learned positions and two token tables
/// (documents and relation descriptions) sharing one body.
#[derive(Debug, Clone)]
pub struct Encoder {
    cfg: EncoderConfig,
    tok_emb: ParamId,
    rel_emb: Option<ParamId>,
    pos_emb: ParamId,
    layers: Vec<Layer>,
    ln_f: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct BoundLayer {
    ln1: (Var, Var),
    q: (Var, Var),
    k: (Var, Var),
    v: (Var, Var),
    o: (Var, Var),
    ln2: (Var, Var),
    ff1: (Var, Var),
    ff2: (Var, Var),
    rel_bias: Option<Var>,
}

/// Encoder parameters read into one graph.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    tok_emb: Var,
    rel_emb: Option<Var>,
    pos_emb: Var,
    layers: Vec<BoundLayer>,
    ln_f: (Var, Var),
}

pub(crate) fn xavier<S: Scalar>(seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(seed, name, &[fan_in, fan_out], a)
}

pub(crate) fn uniform<S: Scalar>(seed: u64, name: &str, shape: &[usize], a: f64) -> Tensor<S> {
    let mut rng = named_stream(seed, name);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| S::lit(rng.random_range(-a..a))).collect())
        .expect("shape matches data")
}

fn normal<S: Scalar>(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor<S> {
    let mut rng = named_stream(seed, name);
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| S::lit(dist.sample(&mut rng))).collect())
        .expect("shape matches data")
}

fn sinusoidal<S: Scalar>(len: usize, dim: usize) -> Tensor<S> {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * rate;
            data.push(S::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, dim], data).expect("shape matches data")
}

/// `bias[w + o][h] = −|o| / 2^h`: every head starts local, with a
/// different reach per head.
fn distance_decay<S: Scalar>(window: usize, heads: usize) -> Tensor<S> {
    let w = window as isize;
    let data = (-w..=w)
        .flat_map(|o| (0..heads).map(move |h| S::lit(-(o.unsigned_abs() as f64) / 2f64.powi(h as i32))))
        .collect();
    Tensor::new(vec![2 * window + 1, heads], data).expect("shape matches data")
}

const TOKEN_EMBEDDING_STREAM: &str = "encoder.token_embedding";

impl Encoder {
    /// Registers and initializes all encoder parameters in `store`. The
    /// relation token table, when requested, starts as a copy of the document table.
    pub fn register<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: &EncoderConfig,
        vocab_size: usize,
        relation_table: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let (d, seed) = (cfg.dim, cfg.seed);
        let tok = normal(seed, TOKEN_EMBEDDING_STREAM, &[vocab_size, d], 1.0);
        let tok_emb = store.add("encoder.token_embedding", tok.clone())?;
        let rel_emb = if relation_table {
            Some(store.add("encoder.relation_token_embedding", tok)?)
        } else {
            None
        };
        let pos_emb = store.add("encoder.position_embedding", sinusoidal(cfg.max_len, d))?;
        let linear = |store: &mut ParamStore<S>, name: String, i: usize, o: usize| -> Result<(ParamId, ParamId)> {
            let w = store.add(format!("{name}.weight"), xavier(seed, &format!("{name}.weight"), i, o))?;
            let b = store.add(format!("{name}.bias"), Tensor::zeros(&[o]))?;
            Ok((w, b))
        };
        let norm = |store: &mut ParamStore<S>, name: String| -> Result<(ParamId, ParamId)> {
            let g = store.add(format!("{name}.gain"), Tensor::filled(&[d], S::one()))?;
            let b = store.add(format!("{name}.shift"), Tensor::zeros(&[d]))?;
            Ok((g, b))
        };
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("encoder.layer{l}");
            layers.push(Layer {
                ln1: norm(store, format!("{p}.attn_norm"))?,
                q: linear(store, format!("{p}.query"), d, d)?,
                k: linear(store, format!("{p}.key"), d, d)?,
                v: linear(store, format!("{p}.value"), d, d)?,
                o: linear(store, format!("{p}.attn_out"), d, d)?,
                ln2: norm(store, format!("{p}.ff_norm"))?,
                ff1: linear(store, format!("{p}.ff_in"), d, cfg.ff_dim)?,
                ff2: linear(store, format!("{p}.ff_out"), cfg.ff_dim, d)?,
                rel_bias: if cfg.relative_window > 0 {
                    Some(store.add(format!("{p}.relative_bias"), distance_decay(cfg.relative_window, cfg.heads))?)
                } else {
                    None
                },
            });
        }
        let ln_f = norm(store, "encoder.final_norm".into())?;
        Ok(Self {
            cfg: cfg.clone(),
            tok_emb,
            rel_emb,
            pos_emb,
            layers,
            ln_f,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn relation_table_param(&self) -> Option<ParamId> {
        self.rel_emb
    }

    pub fn bind<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>) -> Result<BoundEncoder> {
        fn pair<S: Scalar>(g: &mut Graph<S>, store: &ParamStore<S>, (a, b): (ParamId, ParamId)) -> Result<(Var, Var)> {
            Ok((g.param(store, a)?, g.param(store, b)?))
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            layers.push(BoundLayer {
                ln1: pair(g, store, l.ln1)?,
                q: pair(g, store, l.q)?,
                k: pair(g, store, l.k)?,
                v: pair(g, store, l.v)?,
                o: pair(g, store, l.o)?,
                ln2: pair(g, store, l.ln2)?,
                ff1: pair(g, store, l.ff1)?,
                ff2: pair(g, store, l.ff2)?,
                rel_bias: l.rel_bias.map(|id| g.param(store, id)).transpose()?,
            });
        }
        Ok(BoundEncoder {
            tok_emb: g.param(store, self.tok_emb)?,
            rel_emb: self.rel_emb.map(|id| g.param(store, id)).transpose()?,
            pos_emb: g.param(store, self.pos_emb)?,
            layers,
            ln_f: pair(g, store, self.ln_f)?,
        })
    }

    /// Contextual embeddings (len × dim) for one sequence of at most `max_len` tokens.
    pub fn encode_sequence<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &BoundEncoder,
        ids: &[u32],
        table: TokenTable,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let n = ids.len();
        if n == 0 || n > self.cfg.max_len {
            return Err(Error::Shape {
                op: "encode_sequence",
                lhs: vec![n],
                rhs: vec![self.cfg.max_len],
            });
        }
        let rate = if dropout.is_some() { self.cfg.dropout } else { 0.0 };
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..n).collect();
        let table = match table {
            TokenTable::Document => p.tok_emb,
            TokenTable::Relation => p
                .rel_emb
                .ok_or_else(|| Error::Config("encoder has no relation token table".into()))?,
        };
        let tok = g.gather_rows(table, &idx)?;
        let pos = g.gather_rows(p.pos_emb, &positions)?;
        let mut x = g.add(tok, pos)?;
        if self.layers.is_empty() {
            return Ok(x);
        }
        if let Some(r) = dropout.as_deref_mut() {
            x = g.dropout(x, rate, r)?;
        }
        let d = self.cfg.dim;
        let hd = d / self.cfg.heads;
        let inv_sqrt = S::lit(1.0 / (hd as f64).sqrt());
        let w = self.cfg.relative_window as isize;
        let buckets: Vec<usize> = if w > 0 {
            (0..n as isize)
                .flat_map(|i| (0..n as isize).map(move |j| ((j - i).clamp(-w, w) + w) as usize))
                .collect()
        } else {
            Vec::new()
        };
        for l in &p.layers {
            let h = g.layer_norm(x, l.ln1.0, l.ln1.1)?;
            let q = affine(g, h, l.q)?;
            let k = affine(g, h, l.k)?;
            let v = affine(g, h, l.v)?;
            let mut heads = Vec::with_capacity(self.cfg.heads);
            for head in 0..self.cfg.heads {
                let qh = g.slice_cols(q, head * hd, hd)?;
                let kh = g.slice_cols(k, head * hd, hd)?;
                let vh = g.slice_cols(v, head * hd, hd)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let mut scores = g.scale(scores, inv_sqrt)?;
                if let Some(rb) = l.rel_bias {
                    let col = g.slice_cols(rb, head, 1)?;
                    let bias = g.gather_rows(col, &buckets)?;
                    let bias = g.reshape(bias, vec![n, n])?;
                    scores = g.add(scores, bias)?;
                }
                let att = g.softmax_rows(scores)?;
                heads.push(g.matmul(att, vh)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let mut a = affine(g, cat, l.o)?;
            if let Some(r) = dropout.as_deref_mut() {
                a = g.dropout(a, rate, r)?;
            }
            x = g.add(x, a)?;
            let h = g.layer_norm(x, l.ln2.0, l.ln2.1)?;
            let f = affine(g, h, l.ff1)?;
            let f = g.relu(f)?;
            let mut f = affine(g, f, l.ff2)?;
            if let Some(r) = dropout.as_deref_mut() {
                f = g.dropout(f, rate, r)?;
            }
            x = g.add(x, f)?;
        }
        g.layer_norm(x, p.ln_f.0, p.ln_f.1)
    }

    /// Encodes a document chunk by chunk with shared parameters and stacks
    /// the per-token outputs back into document order.
    pub fn encode<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &BoundEncoder,
        doc: &TokenizedDocument,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let mut parts = Vec::with_capacity(doc.chunks.len());
        for c in &doc.chunks {
            parts.push(self.encode_sequence(g, p, &doc.ids[c.clone()], TokenTable::Document, dropout.as_deref_mut())?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat_rows(&parts)
        }
    }

    /// One embedding per relation: the pooling-token output of its description.
    pub fn encode_relations<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        p: &BoundEncoder,
        descriptions: &[Vec<u32>],
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        let mut rows = Vec::with_capacity(descriptions.len());
        for ids in descriptions {
            let h = self.encode_sequence(g, p, ids, TokenTable::Relation, dropout.as_deref_mut())?;
            rows.push(g.gather_rows(h, &[0])?);
        }
        g.concat_rows(&rows)
    }
}

pub(crate) fn affine<S: Scalar>(g: &mut Graph<S>, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}
