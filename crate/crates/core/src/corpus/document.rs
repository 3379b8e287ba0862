use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RelationSchema;
use crate::error::{io_err, json_err, Error, Result};

/// One mention record of a `vertexSet` entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub name: String,
    pub sent_id: usize,
    /// Half-open token range within the sentence.
    pub pos: [usize; 2],
    #[serde(rename = "type", default)]
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub h: usize,
    pub t: usize,
    pub r: String,
    #[serde(default)]
    pub evidence: Vec<usize>,
}

/// A document in the public DocRED JSON layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawDocument {
    pub title: String,
    pub sents: Vec<Vec<String>>,
    #[serde(rename = "vertexSet")]
    pub vertex_set: Vec<Vec<Mention>>,
    #[serde(default)]
    pub labels: Vec<Label>,
}

impl RawDocument {
    pub fn num_entities(&self) -> usize {
        self.vertex_set.len()
    }

    pub fn num_ordered_pairs(&self) -> usize {
        let n = self.vertex_set.len();
        n * n.saturating_sub(1)
    }

    /// Ordered pairs `(h, t)` with `h != t` carrying at least one label.
    pub fn labeled_pairs(&self) -> HashSet<(usize, usize)> {
        self.labels.iter().map(|l| (l.h, l.t)).collect()
    }

    /// Checks every structural invariant of the record against `schema`.
    pub fn validate(&self, schema: &RelationSchema) -> Result<()> {
        let fail = |message: String| Error::Ingest {
            doc: self.title.clone(),
            message,
        };
        for (e, mentions) in self.vertex_set.iter().enumerate() {
            if mentions.is_empty() {
                return Err(fail(format!("vertexSet[{e}] has no mentions")));
            }
            for (j, m) in mentions.iter().enumerate() {
                let Some(sent) = self.sents.get(m.sent_id) else {
                    return Err(fail(format!(
                        "vertexSet[{e}][{j}].sent_id {} out of range ({} sentences)",
                        m.sent_id,
                        self.sents.len()
                    )));
                };
                if m.pos[0] >= m.pos[1] || m.pos[1] > sent.len() {
                    return Err(fail(format!(
                        "vertexSet[{e}][{j}].pos {:?} out of range for sentence {} of length {}",
                        m.pos,
                        m.sent_id,
                        sent.len()
                    )));
                }
            }
        }
        let n = self.vertex_set.len();
        for (i, l) in self.labels.iter().enumerate() {
            if l.h >= n || l.t >= n {
                return Err(fail(format!("labels[{i}] entity index out of range ({n} entities)")));
            }
            if l.h == l.t {
                return Err(fail(format!("labels[{i}] has h == t == {}", l.h)));
            }
            if schema.index_of(&l.r).is_none() {
                return Err(fail(format!("labels[{i}].r {:?} not in schema", l.r)));
            }
            if schema.is_na(&l.r) {
                return Err(fail(format!("labels[{i}] uses the NA relation explicitly")));
            }
        }
        Ok(())
    }
}

/// Reads a JSON array of documents and validates each one.
pub fn load_docred(path: impl AsRef<Path>, schema: &RelationSchema) -> Result<Vec<RawDocument>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let docs: Vec<RawDocument> = serde_json::from_slice(&bytes).map_err(json_err(path))?;
    for d in &docs {
        d.validate(schema)?;
    }
    Ok(docs)
}

pub fn save_docred(path: impl AsRef<Path>, docs: &[RawDocument]) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_vec(docs).map_err(json_err(path))?;
    std::fs::write(path, json).map_err(io_err(path))
}
