//! Entity-marked tokenization, chunking and the transformer encoder.

mod tokenize;
mod transformer;
mod vocab;

pub use tokenize::{chunk_document, tokenize_description, tokenize_with_markers, MentionSpan, TokenizedDocument};
pub use transformer::{BoundEncoder, Encoder, EncoderConfig, TokenTable};
pub(crate) use transformer::{affine, uniform, xavier};
pub use vocab::{escape, unescape, Vocabulary, CLS, MARKER, PAD, UNK};
