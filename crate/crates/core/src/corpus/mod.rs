//! Tokenization, corpus ingestion, domain mixing and block sampling.

mod mix;
pub mod synthetic;
mod tokenizer;

pub use mix::{
    build_stream, sample_blocks, unescape_line, BlockMode, CorpusSource, DatasetMix, LoadedMix,
    LoadedSource, MixPolicy, SourceFormat, Split, TokenBlock, TokenStream,
};
pub use tokenizer::{pre_split, SpecialIds, TokenId, Tokenizer, BASE_VOCAB};

/// Trains a tokenizer on every document of `sources`.
pub fn train_tokenizer(sources: &[CorpusSource], vocab_size: usize, seed: u64) -> crate::Result<Tokenizer> {
    let mut docs = Vec::new();
    for s in sources {
        docs.extend(s.read_documents()?);
    }
    Tokenizer::train(&docs, vocab_size, seed)
}
