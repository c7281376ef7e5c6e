//! Binary artifact container and atomic file writes.
//!
//! ```text
//! magic "FFLW" | version u32 | kind u8 | dtype u8 | header_len u64 | header (JSON)
//!              | payload_len u64 | payload | sha256 of everything before it
//! ```
//!
//! All integers are little-endian. Tensors are stored in their native
//! precision, so a load of a save is bitwise identical. The digest is
//! checked before anything is parsed.

use std::io::Write;
use std::path::Path;

use ndarray::Array1;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::{ActivationMatrix, SharedTokens, SparseRow};
use crate::lm::{LmConfig, LmParams};
use crate::params::{ParamSet, TensorSpec};
use crate::sae::{SaeConfig, SaeParams};
use crate::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"FFLW";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum Kind {
    Lm = 1,
    Sae = 2,
    Activations = 3,
    Tokens = 4,
}

impl Kind {
    fn from_u8(b: u8) -> Option<Self> {
        [Kind::Lm, Kind::Sae, Kind::Activations, Kind::Tokens].into_iter().find(|k| *k as u8 == b)
    }
}

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 1,
        DType::F64 => 2,
    }
}

/// Writes `bytes` to a sibling temporary file, syncs it and renames it over
/// `path`, creating parent directories as needed.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

/// One JSON document per line.
pub fn write_jsonl<R: Serialize>(path: &Path, records: &[R]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn write_json<R: Serialize>(path: &Path, record: &R) -> Result<()> {
    let mut s = serde_json::to_string_pretty(record).expect("records serialize");
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<R: DeserializeOwned>(path: &Path) -> Result<R> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn encode_container(kind: Kind, dtype: DType, header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 + 2 + 16 + header.len() + payload.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind as u8);
    out.push(dtype_code(dtype));
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Container<'a> {
    header: &'a [u8],
    payload: &'a [u8],
}

fn decode_container<'a>(path: &Path, bytes: &'a [u8], kind: Kind, dtype: Option<DType>) -> Result<Container<'a>> {
    let bad = |r: String| Error::format(path, r);
    if bytes.len() < 4 + 4 + 2 + 8 + 8 + DIGEST_LEN {
        return Err(bad(format!("file is {} bytes, too short for a container", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic bytes".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("digest mismatch: file is corrupted".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    match Kind::from_u8(body[8]) {
        Some(k) if k == kind => {}
        other => return Err(bad(format!("expected a {kind:?} artifact, found {other:?}"))),
    }
    if let Some(d) = dtype {
        if body[9] != dtype_code(d) {
            return Err(bad(format!("stored dtype code {} does not match requested {d:?}", body[9])));
        }
    }
    let mut cur = 10;
    let mut take = |len: usize| -> Result<&'a [u8]> {
        if cur + len > body.len() {
            return Err(Error::format(path, "truncated section"));
        }
        let s = &body[cur..cur + len];
        cur += len;
        Ok(s)
    };
    let hlen = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let header = take(hlen)?;
    let plen = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let payload = take(plen)?;
    if cur != body.len() {
        return Err(bad("trailing bytes after payload".into()));
    }
    Ok(Container { header, payload })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct ParamHeader<C> {
    config: C,
    manifest: Vec<TensorSpec>,
    #[serde(default)]
    parent_digest: Option<String>,
    #[serde(default)]
    extras: Vec<TensorSpec>,
}

fn tensor_bytes<T: Scalar>(data: &[T], out: &mut Vec<u8>) {
    for &x in data {
        x.write_le(out);
    }
}

fn read_tensor<T: Scalar>(bytes: &[u8]) -> Vec<T> {
    bytes.chunks_exact(T::DTYPE.size()).map(T::read_le).collect()
}

fn params_payload<T: Scalar, P: ParamSet<T>>(p: &P) -> Vec<u8> {
    let mut payload = Vec::with_capacity(p.num_params() * T::DTYPE.size());
    for (_, _, d) in p.tensors() {
        tensor_bytes(d, &mut payload);
    }
    payload
}

fn load_params_payload<T: Scalar, P: ParamSet<T>>(
    path: &Path,
    target: &mut P,
    stored: &[TensorSpec],
    payload: &[u8],
) -> Result<usize> {
    let expected = target.manifest();
    if expected != stored {
        return Err(Error::format(path, "tensor manifest does not match the stored configuration"));
    }
    let n = target.num_params() * T::DTYPE.size();
    if payload.len() < n {
        return Err(Error::format(path, "payload shorter than the manifest"));
    }
    target.load_flat(&read_tensor::<T>(&payload[..n]));
    Ok(n)
}

/// Saves an LM checkpoint; returns the hex digest of the written file.
pub fn save_lm<T: Scalar>(path: &Path, params: &LmParams<T>, parent_digest: Option<&str>) -> Result<String> {
    let header = ParamHeader {
        config: params.config.clone(),
        manifest: params.manifest(),
        parent_digest: parent_digest.map(str::to_string),
        extras: Vec::new(),
    };
    let bytes = encode_container(Kind::Lm, T::DTYPE, &serde_json::to_vec(&header).unwrap(), &params_payload(params));
    write_atomic(path, &bytes)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load_lm<T: Scalar>(path: &Path) -> Result<LmParams<T>> {
    let bytes = read_file(path)?;
    let c = decode_container(path, &bytes, Kind::Lm, Some(T::DTYPE))?;
    let header: ParamHeader<LmConfig> = serde_json::from_slice(c.header).map_err(|e| Error::format(path, e.to_string()))?;
    let mut params = LmParams::<T>::zeros(&header.config).map_err(|e| Error::format(path, e.to_string()))?;
    let used = load_params_payload(path, &mut params, &header.manifest, c.payload)?;
    if used != c.payload.len() {
        return Err(Error::format(path, "payload longer than the manifest"));
    }
    Ok(params)
}

/// Reads only the configuration and lineage metadata of an LM checkpoint.
pub fn lm_parent_digest(path: &Path) -> Result<Option<String>> {
    let bytes = read_file(path)?;
    let c = decode_container(path, &bytes, Kind::Lm, None)?;
    let header: ParamHeader<LmConfig> = serde_json::from_slice(c.header).map_err(|e| Error::format(path, e.to_string()))?;
    Ok(header.parent_digest)
}

pub fn save_sae<T: Scalar>(path: &Path, sae: &SaeParams<T>, parent_digest: Option<&str>) -> Result<String> {
    let mut payload = params_payload(sae);
    let mut extras = Vec::new();
    if let Some(mu) = &sae.data_mean {
        extras.push(TensorSpec { name: "data_mean".into(), shape: vec![mu.len()], offset: sae.num_params() });
        tensor_bytes(mu.as_slice().unwrap(), &mut payload);
    }
    let header = ParamHeader {
        config: sae.config.clone(),
        manifest: sae.manifest(),
        parent_digest: parent_digest.map(str::to_string),
        extras,
    };
    let bytes = encode_container(Kind::Sae, T::DTYPE, &serde_json::to_vec(&header).unwrap(), &payload);
    write_atomic(path, &bytes)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load_sae<T: Scalar>(path: &Path) -> Result<SaeParams<T>> {
    let bytes = read_file(path)?;
    let c = decode_container(path, &bytes, Kind::Sae, Some(T::DTYPE))?;
    let header: ParamHeader<SaeConfig> = serde_json::from_slice(c.header).map_err(|e| Error::format(path, e.to_string()))?;
    let mut sae = SaeParams::<T>::init(&header.config).map_err(|e| Error::format(path, e.to_string()))?;
    let used = load_params_payload(path, &mut sae, &header.manifest, c.payload)?;
    let rest = &c.payload[used..];
    match header.extras.as_slice() {
        [] if rest.is_empty() => {}
        [mu] if mu.name == "data_mean" && rest.len() == mu.len() * T::DTYPE.size() => {
            sae.data_mean = Some(Array1::from(read_tensor::<T>(rest)));
        }
        _ => return Err(Error::format(path, "unexpected extra tensors in SAE payload")),
    }
    Ok(sae)
}

#[derive(Serialize, Deserialize)]
struct MatrixHeader {
    model_id: String,
    sae_id: String,
    token_stream_id: String,
    n_tokens: usize,
    stream_digest: String,
    m: usize,
}

fn put_varint(mut x: u64, out: &mut Vec<u8>) {
    while x >= 0x80 {
        out.push((x as u8) | 0x80);
        x >>= 7;
    }
    out.push(x as u8);
}

fn get_varint(bytes: &[u8], cur: &mut usize) -> Option<u64> {
    let mut x = 0u64;
    for shift in (0..64).step_by(7) {
        let b = *bytes.get(*cur)?;
        *cur += 1;
        x |= u64::from(b & 0x7f) << shift;
        if b & 0x80 == 0 {
            return Some(x);
        }
    }
    None
}

/// Activation matrices store, per row, a varint count, delta-coded varint
/// token indices and the raw values.
pub fn save_activations<T: Scalar>(path: &Path, m: &ActivationMatrix<T>) -> Result<String> {
    m.validate()?;
    let header = MatrixHeader {
        model_id: m.model_id.clone(),
        sae_id: m.sae_id.clone(),
        token_stream_id: m.token_stream_id.clone(),
        n_tokens: m.n_tokens,
        stream_digest: m.stream_digest.clone(),
        m: m.m(),
    };
    let mut payload = Vec::new();
    for row in &m.rows {
        put_varint(row.nnz() as u64, &mut payload);
        let mut prev = 0u32;
        for &i in &row.indices {
            put_varint(u64::from(i - prev), &mut payload);
            prev = i;
        }
        tensor_bytes(&row.values, &mut payload);
    }
    let bytes = encode_container(Kind::Activations, T::DTYPE, &serde_json::to_vec(&header).unwrap(), &payload);
    write_atomic(path, &bytes)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load_activations<T: Scalar>(path: &Path) -> Result<ActivationMatrix<T>> {
    let bytes = read_file(path)?;
    let c = decode_container(path, &bytes, Kind::Activations, Some(T::DTYPE))?;
    let h: MatrixHeader = serde_json::from_slice(c.header).map_err(|e| Error::format(path, e.to_string()))?;
    let bad = || Error::format(path, "malformed activation rows");
    let p = c.payload;
    let mut cur = 0;
    let mut rows = Vec::with_capacity(h.m);
    for _ in 0..h.m {
        let nnz = get_varint(p, &mut cur).ok_or_else(bad)? as usize;
        if nnz > h.n_tokens {
            return Err(bad());
        }
        let mut indices = Vec::with_capacity(nnz);
        let mut prev = 0u64;
        for _ in 0..nnz {
            prev += get_varint(p, &mut cur).ok_or_else(bad)?;
            indices.push(u32::try_from(prev).map_err(|_| bad())?);
        }
        let vlen = nnz * T::DTYPE.size();
        if cur + vlen > p.len() {
            return Err(bad());
        }
        let values = read_tensor::<T>(&p[cur..cur + vlen]);
        cur += vlen;
        rows.push(SparseRow { indices, values });
    }
    if cur != p.len() {
        return Err(bad());
    }
    let m = ActivationMatrix {
        model_id: h.model_id,
        sae_id: h.sae_id,
        token_stream_id: h.token_stream_id,
        n_tokens: h.n_tokens,
        stream_digest: h.stream_digest,
        rows,
    };
    m.validate().map_err(|e| Error::format(path, e.to_string()))?;
    Ok(m)
}

#[derive(Serialize, Deserialize)]
struct TokensHeader {
    id: String,
    block_len: usize,
    n_tokens: usize,
    digest: String,
}

pub fn save_tokens(path: &Path, s: &SharedTokens) -> Result<String> {
    let header = TokensHeader { id: s.id.clone(), block_len: s.block_len, n_tokens: s.len(), digest: s.digest.clone() };
    let mut payload = Vec::with_capacity(4 * s.len());
    for t in &s.tokens {
        payload.extend_from_slice(&t.to_le_bytes());
    }
    // Token payloads carry no floating point data; the dtype byte is fixed.
    let bytes = encode_container(Kind::Tokens, DType::F32, &serde_json::to_vec(&header).unwrap(), &payload);
    write_atomic(path, &bytes)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn load_tokens(path: &Path) -> Result<SharedTokens> {
    let bytes = read_file(path)?;
    let c = decode_container(path, &bytes, Kind::Tokens, None)?;
    let h: TokensHeader = serde_json::from_slice(c.header).map_err(|e| Error::format(path, e.to_string()))?;
    if c.payload.len() != 4 * h.n_tokens {
        return Err(Error::format(path, "token payload length mismatch"));
    }
    let tokens = c.payload.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect();
    let s = SharedTokens::new(h.id, h.block_len, tokens).map_err(|e| Error::format(path, e.to_string()))?;
    if s.digest != h.digest {
        return Err(Error::format(path, "token stream digest mismatch"));
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn varint_round_trip() {
        for x in [0u64, 1, 127, 128, 300, u32::MAX as u64, u64::MAX] {
            let mut buf = Vec::new();
            put_varint(x, &mut buf);
            let mut cur = 0;
            assert_eq!(get_varint(&buf, &mut cur), Some(x));
            assert_eq!(cur, buf.len());
        }
    }

    #[test]
    fn container_rejects_wrong_kind_and_truncation() {
        let bytes = encode_container(Kind::Lm, DType::F64, b"{}", &[1, 2, 3]);
        let p = Path::new("x");
        assert!(decode_container(p, &bytes, Kind::Lm, Some(DType::F64)).is_ok());
        assert!(decode_container(p, &bytes, Kind::Sae, None).is_err());
        assert!(decode_container(p, &bytes, Kind::Lm, Some(DType::F32)).is_err());
        assert!(decode_container(p, &bytes[..bytes.len() - 1], Kind::Lm, None).is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/a.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(path.parent().unwrap()).unwrap().count(), 1);
    }
}
