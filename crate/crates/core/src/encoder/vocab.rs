use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::{RawDocument, RelationSchema};
use crate::error::{io_err, Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
/// Entity marker inserted before and after every mention.
pub const MARKER: u32 = 3;
const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "*"];

/// Maps a corpus token to its vocabulary form. Tokens that would collide with
/// a reserved entry (or already look escaped) get a leading backslash.
pub fn escape(token: &str) -> String {
    if RESERVED.contains(&token) || token.starts_with('\\') {
        format!("\\{token}")
    } else {
        token.to_string()
    }
}

pub fn unescape(token: &str) -> &str {
    token.strip_prefix('\\').unwrap_or(token)
}

/// Whitespace word-level vocabulary with reserved ids first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).collect()).expect("reserved tokens are valid")
    }
}

impl Vocabulary {
    /// Tokens in order of first appearance across documents, then relation descriptions.
    pub fn build(docs: &[RawDocument], schema: Option<&RelationSchema>) -> Self {
        let mut v = Self::default();
        for d in docs {
            for s in &d.sents {
                for t in s {
                    v.insert(&escape(t));
                }
            }
        }
        if let Some(schema) = schema {
            for r in schema.relations() {
                for t in r.description.split_whitespace() {
                    v.insert(&escape(t));
                }
            }
        }
        v
    }

    fn insert(&mut self, escaped: &str) {
        if !self.index.contains_key(escaped) {
            self.index.insert(escaped.to_string(), self.tokens.len() as u32);
            self.tokens.push(escaped.to_string());
        }
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Config(format!("vocabulary line {i} must be reserved token {r:?}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of a raw corpus token; unseen tokens map to UNK.
    pub fn id(&self, raw: &str) -> u32 {
        self.index.get(&escape(raw)).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// Raw tokens for `ids`, with reserved entries rendered verbatim.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&i| {
                if (i as usize) < RESERVED.len() {
                    self.token(i).to_string()
                } else {
                    unescape(self.token(i)).to_string()
                }
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    /// SHA-256 of the vocabulary file contents, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
