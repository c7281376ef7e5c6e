use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tokenizer::{TokenId, Tokenizer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SourceFormat {
    /// The whole file is one document.
    PlainText,
    #[default]
    OneDocumentPerLine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSource {
    pub name: String,
    pub uri: PathBuf,
    #[serde(default)]
    pub format: SourceFormat,
    #[serde(default)]
    pub domain_tag: String,
    /// Fraction of documents kept, drawn per document from the mix seed.
    #[serde(default = "one")]
    pub subsample: f64,
}

fn one() -> f64 {
    1.0
}

impl CorpusSource {
    pub fn new(name: impl Into<String>, uri: impl Into<PathBuf>) -> Self {
        CorpusSource {
            name: name.into(),
            uri: uri.into(),
            format: SourceFormat::OneDocumentPerLine,
            domain_tag: String::new(),
            subsample: 1.0,
        }
    }

    /// Raw documents of this source, before subsampling.
    pub fn read_documents(&self) -> Result<Vec<String>> {
        let text = std::fs::read_to_string(&self.uri).map_err(|e| {
            Error::io(&self.uri, std::io::Error::new(e.kind(), format!("source `{}`: {e}", self.name)))
        })?;
        Ok(match self.format {
            SourceFormat::PlainText => vec![text],
            SourceFormat::OneDocumentPerLine => text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(unescape_line)
                .collect(),
        })
    }
}

/// Undoes the `\\`, `\n` and `\t` escapes of one-document-per-line files.
pub fn unescape_line(line: &str) -> String {
    let mut out = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "weights")]
pub enum MixPolicy {
    #[default]
    TokenBalanced,
    Weights(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMix {
    pub sources: Vec<CorpusSource>,
    #[serde(default)]
    pub policy: MixPolicy,
    pub seed: u64,
    /// Fraction of documents held out for validation.
    pub validation_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
}

/// How documents shorter than the block length are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockMode {
    /// LM training: each document is followed by `eos`; short documents are
    /// padded with `pad`, which the loss masks.
    Padded,
    /// SAE sampling and activation collection: only windows of real text.
    Contiguous,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBlock {
    pub tokens: Vec<TokenId>,
    pub source: Arc<str>,
    pub doc: usize,
    pub offset: usize,
}

/// A tokenized source, split into train and validation documents.
#[derive(Debug, Clone)]
pub struct LoadedSource {
    pub name: Arc<str>,
    pub domain_tag: String,
    pub train: Arc<Vec<Vec<TokenId>>>,
    pub validation: Arc<Vec<Vec<TokenId>>>,
}

#[derive(Debug, Clone)]
pub struct LoadedMix {
    pub sources: Vec<LoadedSource>,
    pub weights: Vec<f64>,
    pub eos: TokenId,
    pub pad: TokenId,
    pub vocab_size: usize,
}

fn source_seed(seed: u64, name: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}:{name}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

impl DatasetMix {
    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Config("dataset mix has no sources".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &self.sources {
            if !seen.insert(s.name.as_str()) {
                return Err(Error::Config(format!("duplicate source name `{}` in mix", s.name)));
            }
            if !(s.subsample > 0.0 && s.subsample <= 1.0) {
                return Err(Error::Config(format!("source `{}`: subsample must be in (0, 1]", s.name)));
            }
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
        }
        if let MixPolicy::Weights(w) = &self.policy {
            if w.len() != self.sources.len() || w.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
                return Err(Error::Config("mix weights must be positive, one per source".into()));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> Vec<f64> {
        match &self.policy {
            MixPolicy::TokenBalanced => vec![1.0; self.sources.len()],
            MixPolicy::Weights(w) => w.clone(),
        }
    }

    /// Reads, subsamples, splits and tokenizes every source.
    ///
    /// The train/validation assignment is a per-document draw from a seed
    /// derived from `(mix seed, source name)`, so a document's split does not
    /// depend on which other sources share the mix.
    pub fn load(&self, tokenizer: &Tokenizer) -> Result<LoadedMix> {
        self.validate()?;
        let mut sources = Vec::with_capacity(self.sources.len());
        for src in &self.sources {
            let docs = src.read_documents()?;
            let mut rng = ChaCha8Rng::seed_from_u64(source_seed(self.seed, &src.name));
            let (mut train, mut validation) = (Vec::new(), Vec::new());
            for doc in docs {
                let keep = rng.random::<f64>() < src.subsample;
                let to_validation = rng.random::<f64>() < self.validation_fraction;
                if !keep {
                    continue;
                }
                let ids = tokenizer.encode(doc.as_bytes());
                if ids.is_empty() {
                    continue;
                }
                if to_validation {
                    validation.push(ids);
                } else {
                    train.push(ids);
                }
            }
            sources.push(LoadedSource {
                name: Arc::from(src.name.as_str()),
                domain_tag: src.domain_tag.clone(),
                train: Arc::new(train),
                validation: Arc::new(validation),
            });
        }
        let sp = tokenizer.specials();
        Ok(LoadedMix {
            sources,
            weights: self.weights(),
            eos: sp.eos,
            pad: sp.pad,
            vocab_size: tokenizer.vocab_size(),
        })
    }
}

impl LoadedMix {
    /// Sub-mix restricted to the named sources (equal weights).
    pub fn select(&self, names: &[&str]) -> Result<LoadedMix> {
        let mut sources = Vec::new();
        for &n in names {
            let s = self
                .sources
                .iter()
                .find(|s| &*s.name == n)
                .ok_or_else(|| Error::Config(format!("unknown source `{n}`")))?;
            sources.push(s.clone());
        }
        Ok(LoadedMix { weights: vec![1.0; sources.len()], sources, ..self.clone() })
    }

    pub fn stream(&self, split: Split, block_len: usize, mode: BlockMode, seed: u64) -> Result<TokenStream> {
        build_stream(self, split, block_len, mode, seed)
    }
}

#[derive(Debug, Clone)]
struct SourceState {
    name: Arc<str>,
    docs: Arc<Vec<Vec<TokenId>>>,
    /// Cumulative count of valid block starts, one entry per document.
    cumulative: Vec<u64>,
    weight: f64,
    emitted: u64,
}

/// Infinite, seeded block stream over one split of a mix.
///
/// Each block comes from the source furthest behind its policy share
/// (ties to the lower source index), at a start position drawn uniformly
/// over all valid positions of that source. Cloning a stream forks it: the
/// clone replays exactly what the original would have produced.
#[derive(Debug, Clone)]
pub struct TokenStream {
    sources: Vec<SourceState>,
    block_len: usize,
    mode: BlockMode,
    eos: TokenId,
    pad: TokenId,
    vocab_size: usize,
    rng: ChaCha8Rng,
}

fn valid_starts(doc_len: usize, block_len: usize, mode: BlockMode) -> u64 {
    match mode {
        BlockMode::Contiguous => (doc_len + 1).saturating_sub(block_len) as u64,
        // +1 for the trailing eos; short documents contribute one padded block.
        BlockMode::Padded => ((doc_len + 2).saturating_sub(block_len) as u64).max(1),
    }
}

pub fn build_stream(
    mix: &LoadedMix,
    split: Split,
    block_len: usize,
    mode: BlockMode,
    seed: u64,
) -> Result<TokenStream> {
    if block_len < 2 {
        return Err(Error::Contract(format!("block_len must be at least 2, got {block_len}")));
    }
    let mut sources = Vec::new();
    for (src, &weight) in mix.sources.iter().zip(&mix.weights) {
        let docs = match split {
            Split::Train => src.train.clone(),
            Split::Validation => src.validation.clone(),
        };
        let mut acc = 0u64;
        let cumulative: Vec<u64> = docs
            .iter()
            .map(|d| {
                acc += valid_starts(d.len(), block_len, mode);
                acc
            })
            .collect();
        if acc == 0 {
            return Err(Error::Config(format!(
                "source `{}` has no {:?} blocks of length {block_len} in the {:?} split",
                src.name, mode, split
            )));
        }
        sources.push(SourceState { name: src.name.clone(), docs, cumulative, weight, emitted: 0 });
    }
    Ok(TokenStream {
        sources,
        block_len,
        mode,
        eos: mix.eos,
        pad: mix.pad,
        vocab_size: mix.vocab_size,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

impl TokenStream {
    pub fn block_len(&self) -> usize {
        self.block_len
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn pad(&self) -> TokenId {
        self.pad
    }

    pub fn source_names(&self) -> Vec<Arc<str>> {
        self.sources.iter().map(|s| s.name.clone()).collect()
    }

    /// Tokens emitted per source so far.
    pub fn emitted(&self) -> HashMap<Arc<str>, u64> {
        self.sources.iter().map(|s| (s.name.clone(), s.emitted)).collect()
    }

    fn pick_source(&self) -> usize {
        let mut best = 0;
        for i in 1..self.sources.len() {
            let lhs = self.sources[i].emitted as f64 / self.sources[i].weight;
            let rhs = self.sources[best].emitted as f64 / self.sources[best].weight;
            if lhs < rhs {
                best = i;
            }
        }
        best
    }

    pub fn next_block(&mut self) -> TokenBlock {
        let si = self.pick_source();
        let total = *self.sources[si].cumulative.last().unwrap();
        let draw = self.rng.random_range(0..total);
        let src = &mut self.sources[si];
        let doc = src.cumulative.partition_point(|&c| c <= draw);
        let before = if doc == 0 { 0 } else { src.cumulative[doc - 1] };
        let offset = (draw - before) as usize;
        let d = &src.docs[doc];
        let b = self.block_len;
        let tokens = match self.mode {
            BlockMode::Contiguous => d[offset..offset + b].to_vec(),
            BlockMode::Padded => {
                let mut t: Vec<TokenId> = d.iter().copied().chain(std::iter::once(self.eos)).skip(offset).take(b).collect();
                t.resize(b, self.pad);
                t
            }
        };
        src.emitted += b as u64;
        TokenBlock { tokens, source: src.name.clone(), doc, offset }
    }

    /// `ceil(n_tokens / block_len)` blocks drawn from the stream.
    pub fn sample_blocks(&mut self, n_tokens: usize) -> Vec<TokenBlock> {
        let n = n_tokens.div_ceil(self.block_len);
        (0..n).map(|_| self.next_block()).collect()
    }
}

impl Iterator for TokenStream {
    type Item = TokenBlock;

    fn next(&mut self) -> Option<TokenBlock> {
        Some(self.next_block())
    }
}

/// Draws `ceil(n_tokens / block_len)` blocks; the stream's block length must match.
pub fn sample_blocks(stream: &mut TokenStream, block_len: usize, n_tokens: usize) -> Result<Vec<TokenBlock>> {
    if block_len != stream.block_len() {
        return Err(Error::Contract(format!(
            "stream yields {}-token blocks, {block_len} requested",
            stream.block_len()
        )));
    }
    Ok(stream.sample_blocks(n_tokens))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_mix(docs: Vec<(&str, Vec<Vec<TokenId>>)>) -> LoadedMix {
        LoadedMix {
            sources: docs
                .into_iter()
                .map(|(n, d)| LoadedSource {
                    name: Arc::from(n),
                    domain_tag: String::new(),
                    train: Arc::new(d),
                    validation: Arc::new(vec![vec![1, 2, 3]]),
                })
                .collect(),
            weights: vec![1.0, 1.0],
            eos: 257,
            pad: 258,
            vocab_size: 300,
        }
    }

    #[test]
    fn padded_blocks_end_with_eos_then_pad() {
        let mut mix = toy_mix(vec![("a", vec![vec![5, 6]])]);
        mix.weights = vec![1.0];
        let mut s = mix.stream(Split::Train, 6, BlockMode::Padded, 0).unwrap();
        let b = s.next_block();
        assert_eq!(b.tokens, vec![5, 6, 257, 258, 258, 258]);
    }

    #[test]
    fn contiguous_mode_rejects_sources_without_long_documents() {
        let mut mix = toy_mix(vec![("a", vec![vec![5, 6]])]);
        mix.weights = vec![1.0];
        assert!(matches!(mix.stream(Split::Train, 4, BlockMode::Contiguous, 0), Err(Error::Config(_))));
    }

    #[test]
    fn block_len_below_two_is_a_contract_error() {
        let mix = toy_mix(vec![("a", vec![vec![5; 10]]), ("b", vec![vec![6; 10]])]);
        assert!(matches!(mix.stream(Split::Train, 1, BlockMode::Padded, 0), Err(Error::Contract(_))));
    }

    #[test]
    fn weighted_policy_tracks_weights() {
        let mut mix = toy_mix(vec![("a", vec![vec![5; 40]]), ("b", vec![vec![6; 40]])]);
        mix.weights = vec![3.0, 1.0];
        let mut s = mix.stream(Split::Train, 8, BlockMode::Contiguous, 1).unwrap();
        let _ = s.sample_blocks(100_000);
        let e = s.emitted();
        let a = e[&Arc::from("a")] as f64;
        let b = e[&Arc::from("b")] as f64;
        assert!((a / (a + b) - 0.75).abs() < 0.01);
    }

    #[test]
    fn validation_split_is_separate() {
        let mix = toy_mix(vec![("a", vec![vec![9; 10]]), ("b", vec![vec![9; 10]])]);
        let mut s = mix.stream(Split::Validation, 2, BlockMode::Contiguous, 0).unwrap();
        for b in s.sample_blocks(50) {
            assert!(b.tokens.iter().all(|&t| t != 9));
        }
    }
}
