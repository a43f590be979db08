//! Model file layout: magic, format version, JSON header, then
//! little-endian f64 parameters.

use serde::de::DeserializeOwned;
use serde::Serialize;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CBMFMODL";
const FORMAT_VERSION: u32 = 1;

pub(crate) fn encode<H: Serialize>(kind: &str, header: &H, params: &[f64]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&serde_json::json!({ "kind": kind, "model": header }))?;
    let mut out = Vec::with_capacity(24 + header.len() + params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Invalid("model file is truncated".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn take_u64(bytes: &mut &[u8]) -> Result<usize> {
    let b = take(bytes, 8)?;
    Ok(u64::from_le_bytes(b.try_into().expect("eight bytes")) as usize)
}

pub(crate) fn decode<H: DeserializeOwned>(kind: &str, mut bytes: &[u8]) -> Result<(H, Vec<f64>)> {
    if take(&mut bytes, 8)? != MAGIC {
        return Err(Error::Invalid("not a model file".into()));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().expect("four bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Invalid(format!("unsupported model format version {version}")));
    }
    let hlen = take_u64(&mut bytes)?;
    let mut header: serde_json::Value = serde_json::from_slice(take(&mut bytes, hlen)?)?;
    if header["kind"] != kind {
        return Err(Error::Invalid(format!("expected a {kind} model, found {}", header["kind"])));
    }
    let model: H = serde_json::from_value(header["model"].take())?;
    let n = take_u64(&mut bytes)?;
    let raw = take(&mut bytes, n.checked_mul(8).ok_or_else(|| Error::Invalid("bad length".into()))?)?;
    if !bytes.is_empty() {
        return Err(Error::Invalid("trailing bytes after model parameters".into()));
    }
    let params = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect();
    Ok((model, params))
}

pub(crate) fn save_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    crate::data::write_file(path, bytes)
}

pub(crate) fn load_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
