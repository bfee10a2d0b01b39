//! Vocabulary, tokenisation with gazetteer linking, marker insertion and
//! the Transformer text encoder.

mod annotated;
mod encoder;
mod vocab;

pub use annotated::{
    insert_markers, read_corpus, read_jsonl, split_words, to_jsonl, tokenize, AnnotatedText, CorpusRecord,
    Gazetteer, MarkerTask, Mention, MentionRecord, Span,
};
pub use encoder::{EncoderLayer, TextEncoder, TextEncoderConfig, TextOutput};
pub use vocab::{Specials, TokenId, Vocabulary, CLS, ENT, HD, MASK, PAD, RESERVED, SEP, TL, UNK};
