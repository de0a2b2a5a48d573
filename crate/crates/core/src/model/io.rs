//! Weight file format.
//!
//! ```text
//! "DLMW" | u32 version=1 | u32 d, h, n_layers, d_ff, vocab, max_len, mode
//! f32 tensors in declaration order, row-major
//! u64 FNV-1a of the tensor payload bytes
//! ```
//! All integers and floats are little-endian.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::spec::{Attention, ModelSpec};
use crate::model::weights::{tensor_shapes, Weights};

pub const WEIGHT_MAGIC: &[u8; 4] = b"DLMW";
pub const WEIGHT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 7 * 4;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

fn payload_bytes(weights: &Weights) -> Vec<u8> {
    weights
        .tensors()
        .iter()
        .flat_map(|t| t.iter().flat_map(|x| x.to_le_bytes()))
        .collect()
}

/// Serialize to `out`; returns the payload checksum.
pub fn write_weights(weights: &Weights, mut out: impl Write) -> Result<u64> {
    let s = &weights.spec;
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(WEIGHT_MAGIC);
    header.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
    for field in [
        s.d_model as u32,
        s.n_heads as u32,
        s.n_layers as u32,
        s.d_ff as u32,
        s.vocab as u32,
        s.max_len as u32,
        s.attention.code(),
    ] {
        header.extend_from_slice(&field.to_le_bytes());
    }
    let payload = payload_bytes(weights);
    let checksum = fnv1a(&payload);
    out.write_all(&header)?;
    out.write_all(&payload)?;
    out.write_all(&checksum.to_le_bytes())?;
    Ok(checksum)
}

pub fn save_weights(weights: &Weights, path: impl AsRef<Path>) -> Result<u64> {
    let mut buf = Vec::new();
    let checksum = write_weights(weights, &mut buf)?;
    fs::write(path, buf)?;
    Ok(checksum)
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        reason: reason.into(),
    }
}

fn u32_at(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| format_err(bytes.len(), "truncated header"))
}

/// Parse a complete weight file image.
pub fn read_weights(mut input: impl Read) -> Result<Weights> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Weights> {
    decode(&fs::read(path)?)
}

fn decode(bytes: &[u8]) -> Result<Weights> {
    if bytes.len() < 4 || &bytes[..4] != WEIGHT_MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    let version = u32_at(bytes, 4)?;
    if version != WEIGHT_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let mut fields = [0usize; 7];
    for (i, f) in fields.iter_mut().enumerate() {
        *f = u32_at(bytes, 8 + 4 * i)? as usize;
    }
    let attention = Attention::from_code(fields[6] as u32)
        .ok_or_else(|| format_err(8 + 24, format!("unknown attention mode {}", fields[6])))?;
    let spec = ModelSpec {
        d_model: fields[0],
        n_heads: fields[1],
        n_layers: fields[2],
        d_ff: fields[3],
        vocab: fields[4],
        max_len: fields[5],
        attention,
    };
    spec.validate()
        .map_err(|e| format_err(8, format!("invalid shape header: {e}")))?;

    let shapes = tensor_shapes(&spec);
    let payload_len: usize = shapes.iter().map(|(r, c)| r * c * 4).sum();
    let payload_end = HEADER_LEN + payload_len;
    if bytes.len() < payload_end + 8 {
        return Err(format_err(
            bytes.len(),
            format!("truncated: need {} bytes, have {}", payload_end + 8, bytes.len()),
        ));
    }
    if bytes.len() > payload_end + 8 {
        return Err(format_err(payload_end + 8, "trailing bytes after checksum"));
    }
    let payload = &bytes[HEADER_LEN..payload_end];
    let stored = u64::from_le_bytes(bytes[payload_end..payload_end + 8].try_into().unwrap());
    let actual = fnv1a(payload);
    if stored != actual {
        return Err(format_err(
            payload_end,
            format!("checksum mismatch: stored {stored:#018x}, computed {actual:#018x}"),
        ));
    }

    let mut offset = 0;
    let mut flat = Vec::with_capacity(shapes.len());
    for (r, c) in shapes {
        let n = r * c;
        let t: Vec<f32> = payload[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if let Some(bad) = t.iter().position(|x| !x.is_finite()) {
            return Err(format_err(HEADER_LEN + offset + 4 * bad, "non-finite weight"));
        }
        flat.push(t);
        offset += 4 * n;
    }
    Weights::from_flat(spec, flat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_weights;

    fn spec() -> ModelSpec {
        ModelSpec {
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 12,
            vocab: 7,
            max_len: 10,
            attention: Attention::Causal,
        }
    }

    fn image() -> Vec<u8> {
        let mut buf = Vec::new();
        write_weights(&init_weights(&spec(), 3).unwrap(), &mut buf).unwrap();
        buf
    }

    #[test]
    fn round_trip_bit_exact() {
        let w = init_weights(&spec(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dlmw");
        let sum = save_weights(&w, &path).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(back, w);
        assert_eq!(sum, fnv1a(&payload_bytes(&back)));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let buf = image();
        for cut in [0, 3, 20, HEADER_LEN + 5, buf.len() - 1] {
            let err = decode(&buf[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format { .. }), "cut {cut}: {err}");
        }
    }

    #[test]
    fn bad_magic_version_shape_checksum() {
        let mut b = image();
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(Error::Format { offset: 0, .. })));

        let mut b = image();
        b[4] = 9;
        assert!(matches!(decode(&b), Err(Error::Format { offset: 4, .. })));

        let mut b = image();
        b[12] = 3; // n_heads = 3 does not divide d = 8
        assert!(matches!(decode(&b), Err(Error::Format { offset: 8, .. })));

        let mut b = image();
        b[HEADER_LEN + 1] ^= 0x40;
        let payload_end = b.len() - 8;
        assert!(matches!(decode(&b), Err(Error::Format { offset, .. }) if offset == payload_end as u64));
    }
}
