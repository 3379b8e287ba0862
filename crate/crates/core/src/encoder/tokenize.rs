use std::ops::Range;

use super::vocab::{Vocabulary, CLS, MARKER};
use crate::corpus::RawDocument;
use crate::error::{Error, Result};

/// Token positions of one marked mention: `marker` is the opening `*`,
/// `span` runs from the opening to one past the closing marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MentionSpan {
    pub marker: usize,
    pub span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedDocument {
    pub title: String,
    pub ids: Vec<u32>,
    /// Per entity, its mentions in document order.
    pub mentions: Vec<Vec<MentionSpan>>,
    /// Disjoint half-open ranges covering `ids`.
    pub chunks: Vec<Range<usize>>,
}

impl TokenizedDocument {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn marker_count(&self) -> usize {
        self.ids.iter().filter(|&&i| i == MARKER).count()
    }

    /// Ids with entity markers removed.
    pub fn unmarked_ids(&self) -> Vec<u32> {
        self.ids.iter().copied().filter(|&i| i != MARKER).collect()
    }
}

/// Flattens the document's sentences and wraps every mention as `* mention *`.
pub fn tokenize_with_markers(doc: &RawDocument, vocab: &Vocabulary) -> Result<TokenizedDocument> {
    let fail = |message: String| Error::Ingest {
        doc: doc.title.clone(),
        message,
    };
    let mut offsets = Vec::with_capacity(doc.sents.len());
    let mut words: Vec<&str> = Vec::new();
    for s in &doc.sents {
        offsets.push(words.len());
        words.extend(s.iter().map(String::as_str));
    }
    let n = words.len();
    // openers[i]: mentions starting at word i
    let mut openers: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    let mut mention_end: Vec<Vec<usize>> = Vec::new();
    for (e, ms) in doc.vertex_set.iter().enumerate() {
        mention_end.push(vec![0; ms.len()]);
        for (j, m) in ms.iter().enumerate() {
            let Some(sent) = doc.sents.get(m.sent_id) else {
                return Err(fail(format!("mention {e}/{j} sent_id {} out of bounds", m.sent_id)));
            };
            if m.pos[0] >= m.pos[1] || m.pos[1] > sent.len() {
                return Err(fail(format!("mention {e}/{j} pos {:?} out of bounds", m.pos)));
            }
            let start = offsets[m.sent_id] + m.pos[0];
            let end = offsets[m.sent_id] + m.pos[1];
            openers[start].push((e, j));
            mention_end[e][j] = end;
        }
    }
    let mut ids = Vec::with_capacity(n + 2 * doc.vertex_set.iter().map(Vec::len).sum::<usize>());
    let mut marker_at: Vec<Vec<usize>> = doc.vertex_set.iter().map(|m| vec![0; m.len()]).collect();
    let mut close_at: Vec<Vec<usize>> = marker_at.clone();
    // open_by_end[i]: mentions whose closing marker follows word i - 1
    let mut open_by_end: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n + 1];
    for (i, w) in words.iter().enumerate() {
        for &(e, j) in &openers[i] {
            marker_at[e][j] = ids.len();
            ids.push(MARKER);
            open_by_end[mention_end[e][j]].push((e, j));
        }
        ids.push(vocab.id(w));
        for &(e, j) in &open_by_end[i + 1] {
            close_at[e][j] = ids.len();
            ids.push(MARKER);
        }
    }
    let mut mentions: Vec<Vec<MentionSpan>> = marker_at
        .iter()
        .zip(&close_at)
        .map(|(opens, closes)| {
            opens
                .iter()
                .zip(closes)
                .map(|(&o, &c)| MentionSpan {
                    marker: o,
                    span: (o, c + 1),
                })
                .collect()
        })
        .collect();
    for m in &mut mentions {
        m.sort_by_key(|s| s.marker);
    }
    let len = ids.len();
    Ok(TokenizedDocument {
        title: doc.title.clone(),
        ids,
        mentions,
        chunks: vec![0..len],
    })
}

/// Splits into consecutive chunks of at most `max_len` tokens. A boundary that
/// would cut a marked mention moves left to the mention's opening marker.
pub fn chunk_document(mut doc: TokenizedDocument, max_len: usize) -> Result<TokenizedDocument> {
    let n = doc.ids.len();
    let spans: Vec<(usize, usize)> = doc.mentions.iter().flatten().map(|m| m.span).collect();
    for &(s, e) in &spans {
        if e - s > max_len {
            return Err(Error::UnsupportedDocument {
                doc: doc.title.clone(),
                message: format!("mention of {} tokens exceeds chunk length {max_len}", e - s),
            });
        }
    }
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = (start + max_len).min(n);
        if end < n {
            // Repeat: shifting left may land inside an enclosing mention.
            loop {
                let cut = spans.iter().filter(|&&(s, e)| s < end && end < e).map(|&(s, _)| s).min();
                match cut {
                    Some(s) if s < end => end = s,
                    _ => break,
                }
            }
            if end <= start {
                return Err(Error::UnsupportedDocument {
                    doc: doc.title.clone(),
                    message: format!("no mention-preserving chunk boundary after token {start}"),
                });
            }
        }
        chunks.push(start..end);
        start = end;
    }
    if chunks.is_empty() {
        chunks.push(0..0);
    }
    doc.chunks = chunks;
    Ok(doc)
}

/// `[CLS]` followed by the description's words.
pub fn tokenize_description(description: &str, vocab: &Vocabulary) -> Vec<u32> {
    std::iter::once(CLS)
        .chain(description.split_whitespace().map(|w| vocab.id(w)))
        .collect()
}
