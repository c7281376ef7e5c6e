//! Byte-fallback pair-merge tokenizer.
//!
//! Ids `0..256` are raw bytes, followed by the three specials and then one
//! id per learned merge. Text is pre-split into chunks (an optional leading
//! space plus a run of word or punctuation bytes, or a whitespace run) and
//! merges never cross chunk boundaries.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;

use crate::error::{Error, Result};

pub type TokenId = u32;

const MAGIC: &str = "featflow-tokenizer";
const VERSION: u32 = 1;

pub const BOS_TEXT: &str = "<|bos|>";
pub const EOS_TEXT: &str = "<|eos|>";
pub const PAD_TEXT: &str = "<|pad|>";

/// Number of byte-level base tokens plus specials.
pub const BASE_VOCAB: usize = 256 + 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub bos: TokenId,
    pub eos: TokenId,
    pub pad: TokenId,
}

const SPECIALS: SpecialIds = SpecialIds { bos: 256, eos: 257, pad: 258 };

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    token_table: Vec<Vec<u8>>,
    merges: Vec<(TokenId, TokenId)>,
    ranks: HashMap<(TokenId, TokenId), u32>,
    seed: u64,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ByteClass {
    Space,
    Word,
    Punct,
}

fn class(b: u8) -> ByteClass {
    if b.is_ascii_whitespace() {
        ByteClass::Space
    } else if b.is_ascii_alphanumeric() || b == b'_' || b >= 0x80 {
        ByteClass::Word
    } else {
        ByteClass::Punct
    }
}

/// Splits `text` into merge chunks. Concatenating the chunks gives back `text`.
pub fn pre_split(text: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < text.len() {
        let start = i;
        if class(text[i]) == ByteClass::Space {
            let mut j = i;
            while j < text.len() && class(text[j]) == ByteClass::Space {
                j += 1;
            }
            if j < text.len() && text[j - 1] == b' ' {
                // The final space glues onto the following run.
                if j - 1 > start {
                    out.push(&text[start..j - 1]);
                }
                let end = scan_run(text, j - 1);
                out.push(&text[j - 1..end]);
                i = end;
            } else {
                out.push(&text[start..j]);
                i = j;
            }
        } else {
            i = scan_run(text, i);
            out.push(&text[start..i]);
        }
    }
    out
}

/// From `i` (a space followed by a non-space, or a non-space), consume the
/// optional space and then one run of a single class.
fn scan_run(text: &[u8], mut i: usize) -> usize {
    if text[i] == b' ' && i + 1 < text.len() && class(text[i + 1]) != ByteClass::Space {
        i += 1;
    }
    let c = class(text[i]);
    while i < text.len() && class(text[i]) == c {
        i += 1;
    }
    i
}

impl Tokenizer {
    /// Byte-level tokenizer with no merges.
    pub fn byte_level() -> Self {
        let mut token_table: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        token_table.push(BOS_TEXT.as_bytes().to_vec());
        token_table.push(EOS_TEXT.as_bytes().to_vec());
        token_table.push(PAD_TEXT.as_bytes().to_vec());
        Tokenizer { token_table, merges: Vec::new(), ranks: HashMap::new(), seed: 0 }
    }

    /// Learns up to `vocab_size - BASE_VOCAB` merges from `documents`.
    ///
    /// Merge candidates are ranked by corpus frequency, ties broken by the
    /// smaller `(left, right)` id pair. A candidate is skipped when the
    /// current rules would not tokenize its concatenated bytes as exactly
    /// `[left, right]`; this keeps `encode(decode([id])) == [id]` for every id.
    /// Training stops early when no pair occurs at least twice.
    pub fn train<D: AsRef<[u8]>>(documents: &[D], vocab_size: usize, seed: u64) -> Result<Self> {
        if vocab_size < BASE_VOCAB {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} is below the byte-level base vocabulary of {BASE_VOCAB}"
            )));
        }
        let total: usize = documents.iter().map(|d| d.as_ref().len()).sum();
        if total == 0 {
            return Err(Error::Config("tokenizer corpus is empty".into()));
        }
        let mut tok = Self::byte_level();
        tok.seed = seed;

        let mut word_freq: HashMap<&[u8], u64> = HashMap::new();
        for doc in documents {
            for piece in split_specials(doc.as_ref()) {
                if let Piece::Text(text) = piece {
                    for chunk in pre_split(text) {
                        *word_freq.entry(chunk).or_default() += 1;
                    }
                }
            }
        }
        // Deterministic word order, independent of hashing.
        let mut words: Vec<(Vec<TokenId>, u64)> = word_freq
            .into_iter()
            .map(|(w, f)| (w.iter().map(|&b| b as TokenId).collect(), f))
            .collect();
        words.sort();

        let mut pair_counts: HashMap<(TokenId, TokenId), i64> = HashMap::new();
        let mut where_: HashMap<(TokenId, TokenId), HashSet<usize>> = HashMap::new();
        for (wi, (w, f)) in words.iter().enumerate() {
            for p in w.windows(2) {
                let key = (p[0], p[1]);
                *pair_counts.entry(key).or_default() += *f as i64;
                where_.entry(key).or_default().insert(wi);
            }
        }
        let mut heap: BinaryHeap<(i64, Reverse<(TokenId, TokenId)>)> =
            pair_counts.iter().map(|(&p, &c)| (c, Reverse(p))).collect();
        let mut banned: HashSet<(TokenId, TokenId)> = HashSet::new();

        while tok.token_table.len() < vocab_size {
            let Some((count, Reverse(pair))) = heap.pop() else { break };
            if banned.contains(&pair) || pair_counts.get(&pair).copied().unwrap_or(0) != count {
                continue;
            }
            if count < 2 {
                break;
            }
            let mut joined = tok.token_table[pair.0 as usize].clone();
            joined.extend_from_slice(&tok.token_table[pair.1 as usize]);
            if tok.encode_chunk(&joined) != [pair.0, pair.1] {
                banned.insert(pair);
                continue;
            }
            let new_id = tok.token_table.len() as TokenId;
            tok.token_table.push(joined);
            tok.ranks.insert(pair, tok.merges.len() as u32);
            tok.merges.push(pair);

            let mut affected: Vec<usize> =
                where_.remove(&pair).map(|s| s.into_iter().collect()).unwrap_or_default();
            affected.sort_unstable();
            let mut touched: HashSet<(TokenId, TokenId)> = HashSet::new();
            for wi in affected {
                let (w, f) = &mut words[wi];
                let f = *f as i64;
                for p in w.windows(2) {
                    let key = (p[0], p[1]);
                    *pair_counts.get_mut(&key).unwrap() -= f;
                    touched.insert(key);
                }
                *w = merge_pair(w, pair, new_id);
                for p in w.windows(2) {
                    let key = (p[0], p[1]);
                    *pair_counts.entry(key).or_default() += f;
                    where_.entry(key).or_default().insert(wi);
                    touched.insert(key);
                }
            }
            pair_counts.remove(&pair);
            let mut touched: Vec<_> = touched.into_iter().collect();
            touched.sort_unstable();
            for key in touched {
                if let Some(&c) = pair_counts.get(&key) {
                    if c > 0 {
                        heap.push((c, Reverse(key)));
                    }
                }
            }
        }
        Ok(tok)
    }

    pub fn vocab_size(&self) -> usize {
        self.token_table.len()
    }

    pub fn specials(&self) -> SpecialIds {
        SPECIALS
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (256..259).contains(&id)
    }

    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.token_table.get(id as usize).map(|v| v.as_slice())
    }

    /// Display form of a token, lossy for non-UTF-8 byte sequences.
    pub fn token_str(&self, id: TokenId) -> String {
        self.token_bytes(id).map(|b| String::from_utf8_lossy(b).into_owned()).unwrap_or_default()
    }

    fn encode_chunk(&self, chunk: &[u8]) -> Vec<TokenId> {
        let mut syms: Vec<TokenId> = chunk.iter().map(|&b| b as TokenId).collect();
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&r| (r, (p[0], p[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            syms = merge_pair(&syms, pair, BASE_VOCAB as TokenId + rank);
        }
        syms
    }

    pub fn encode(&self, text: &[u8]) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(text.len() / 2);
        let mut cache: HashMap<&[u8], Vec<TokenId>> = HashMap::new();
        for piece in split_specials(text) {
            match piece {
                Piece::Special(id) => out.push(id),
                Piece::Text(t) => {
                    for chunk in pre_split(t) {
                        let ids = cache.entry(chunk).or_insert_with(|| self.encode_chunk(chunk));
                        out.extend_from_slice(ids);
                    }
                }
            }
        }
        out
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let bytes = self.token_bytes(id).ok_or_else(|| {
                Error::Contract(format!("token id {id} out of range for vocab {}", self.vocab_size()))
            })?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    /// Self-describing text serialization. Byte-identical for identical tokenizers.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let sp = self.specials();
        writeln!(s, "{MAGIC} {VERSION}").unwrap();
        writeln!(s, "vocab_size {}", self.vocab_size()).unwrap();
        writeln!(s, "seed {}", self.seed).unwrap();
        writeln!(s, "specials bos={} eos={} pad={}", sp.bos, sp.eos, sp.pad).unwrap();
        writeln!(s, "merges {}", self.merges.len()).unwrap();
        for (id, bytes) in self.token_table.iter().enumerate() {
            writeln!(s, "token {id} {}", B64.encode(bytes)).unwrap();
        }
        for (rank, (a, b)) in self.merges.iter().enumerate() {
            writeln!(s, "merge {} {a} {b}", BASE_VOCAB + rank).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::format("<tokenizer>", reason);
        let mut lines = text.lines();
        let mut header = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(format!("missing `{key}` line")))?;
            line.strip_prefix(key)
                .map(|v| v.trim().to_string())
                .ok_or_else(|| bad(format!("expected `{key}`, found `{line}`")))
        };
        let version = header(MAGIC)?;
        if version != VERSION.to_string() {
            return Err(bad(format!("unsupported tokenizer version {version}")));
        }
        let parse_usize = |v: String| v.parse::<usize>().map_err(|e| bad(e.to_string()));
        let vocab_size = parse_usize(header("vocab_size")?)?;
        let seed = header("seed")?.parse::<u64>().map_err(|e| bad(e.to_string()))?;
        let specials = header("specials")?;
        if specials != "bos=256 eos=257 pad=258" {
            return Err(bad(format!("unexpected special ids `{specials}`")));
        }
        let n_merges = parse_usize(header("merges")?)?;
        if vocab_size != BASE_VOCAB + n_merges {
            return Err(bad("vocab_size does not match merge count".into()));
        }
        let mut tok = Self::byte_level();
        tok.seed = seed;
        let mut table = Vec::with_capacity(vocab_size);
        for (line_no, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(' ').collect();
            match fields.as_slice() {
                ["token", id, b64] => {
                    let id = id.parse::<usize>().map_err(|e| bad(e.to_string()))?;
                    if id != table.len() {
                        return Err(bad(format!("token ids not dense at line {line_no}")));
                    }
                    table.push(B64.decode(b64).map_err(|e| bad(e.to_string()))?);
                }
                ["token", id] => {
                    let id = id.parse::<usize>().map_err(|e| bad(e.to_string()))?;
                    if id != table.len() {
                        return Err(bad(format!("token ids not dense at line {line_no}")));
                    }
                    table.push(Vec::new());
                }
                ["merge", id, a, b] => {
                    let p = |v: &str| v.parse::<TokenId>().map_err(|e| bad(e.to_string()));
                    let (id, a, b) = (p(id)?, p(a)?, p(b)?);
                    if id as usize != tok.token_table.len() || a >= id || b >= id {
                        return Err(bad(format!("malformed merge at line {line_no}")));
                    }
                    let mut joined = tok.token_table[a as usize].clone();
                    joined.extend_from_slice(&tok.token_table[b as usize]);
                    tok.ranks.insert((a, b), tok.merges.len() as u32);
                    tok.merges.push((a, b));
                    tok.token_table.push(joined);
                }
                [""] => {}
                _ => return Err(bad(format!("unrecognized line `{line}`"))),
            }
        }
        if table != tok.token_table {
            return Err(bad("token table disagrees with merge list".into()));
        }
        Ok(tok)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::persist::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Format { reason, .. } => Error::format(path, reason),
            other => other,
        })
    }
}

fn merge_pair(syms: &[TokenId], pair: (TokenId, TokenId), new_id: TokenId) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    out
}

enum Piece<'a> {
    Text(&'a [u8]),
    Special(TokenId),
}

fn split_specials(text: &[u8]) -> Vec<Piece<'_>> {
    const MARKERS: [(&str, TokenId); 3] = [(BOS_TEXT, 256), (EOS_TEXT, 257), (PAD_TEXT, 258)];
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < text.len() {
        if text[i] == b'<' {
            if let Some(&(m, id)) = MARKERS.iter().find(|(m, _)| text[i..].starts_with(m.as_bytes())) {
                if i > start {
                    out.push(Piece::Text(&text[start..i]));
                }
                out.push(Piece::Special(id));
                i += m.len();
                start = i;
                continue;
            }
        }
        i += 1;
    }
    if start < text.len() {
        out.push(Piece::Text(&text[start..]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pre_split_is_lossless_and_glues_spaces() {
        let text = b"def f(x):\n    return x  + 1\n\nhello, world";
        let chunks = pre_split(text);
        assert_eq!(chunks.concat(), text.to_vec());
        assert!(chunks.contains(&&b" return"[..]));
        assert!(chunks.contains(&&b" world"[..]));
        assert!(chunks.contains(&&b"    "[..]) || chunks.contains(&&b"\n   "[..]));
    }

    #[test]
    fn minimal_vocab_has_no_merges() {
        let tok = Tokenizer::train(&["hello hello hello"], BASE_VOCAB, 1).unwrap();
        assert!(tok.merges().is_empty());
        assert_eq!(tok.vocab_size(), 259);
    }

    #[test]
    fn config_errors() {
        assert!(matches!(Tokenizer::train(&["abc"], 200, 0), Err(Error::Config(_))));
        let empty: [&str; 1] = [""];
        assert!(matches!(Tokenizer::train(&empty, 300, 0), Err(Error::Config(_))));
    }

    #[test]
    fn empty_input_encodes_to_nothing() {
        assert!(Tokenizer::byte_level().encode(b"").is_empty());
    }

    #[test]
    fn most_frequent_merge_on_alternating_text() {
        let text = "ab".repeat(500);
        // Brute-force count of adjacent byte pairs.
        let mut counts: HashMap<(u8, u8), usize> = HashMap::new();
        for w in text.as_bytes().windows(2) {
            *counts.entry((w[0], w[1])).or_default() += 1;
        }
        let best = counts.iter().max_by_key(|(p, c)| (**c, Reverse(**p))).unwrap().0;
        assert_eq!(*best, (b'a', b'b'));
        let tok = Tokenizer::train(&[text], BASE_VOCAB + 4, 0).unwrap();
        assert_eq!(tok.merges()[0], (b'a' as TokenId, b'b' as TokenId));
    }

    #[test]
    fn specials_roundtrip() {
        let tok = Tokenizer::byte_level();
        let ids = tok.encode(b"x<|eos|>y");
        assert_eq!(ids, vec![b'x' as u32, 257, b'y' as u32]);
        assert_eq!(tok.decode(&ids).unwrap(), b"x<|eos|>y");
    }

    #[test]
    fn text_format_is_stable_and_parses() {
        let docs = ["the cat sat on the mat", "for i in range(10):\n    print(i)"];
        let a = Tokenizer::train(&docs, 300, 3).unwrap();
        let b = Tokenizer::train(&docs, 300, 3).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        let parsed = Tokenizer::from_text(&a.to_text()).unwrap();
        assert_eq!(parsed, a);
        let corrupted = a.to_text().replacen("merge 259", "merge 258", 1);
        assert!(Tokenizer::from_text(&corrupted).is_err());
    }
}
