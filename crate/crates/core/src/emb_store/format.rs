//! EMB1 / LBL1 binary encodings.
//!
//! ```text
//! EMB1: b"EMB1" | N: u32 LE | d: u32 LE | N*d f32 LE, row-major
//! LBL1: b"LBL1" | N: u32 LE | N u32 LE identities
//! ```

use std::fs;
use std::path::Path;

use crate::{Error, Result};

pub const EMB_MAGIC: [u8; 4] = *b"EMB1";
pub const LBL_MAGIC: [u8; 4] = *b"LBL1";
pub const EMB_HEADER_LEN: usize = 12;
pub const LBL_HEADER_LEN: usize = 8;

/// A decoded EMB1 payload before any semantic validation.
#[derive(Clone, Debug, PartialEq)]
pub struct RawMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

pub fn encode_emb(rows: usize, cols: usize, data: &[f32]) -> Vec<u8> {
    assert_eq!(data.len(), rows * cols, "payload length must equal rows * cols");
    let mut out = Vec::with_capacity(EMB_HEADER_LEN + 4 * data.len());
    out.extend_from_slice(&EMB_MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_emb(bytes: &[u8], path: &Path) -> Result<RawMatrix> {
    let magic = read_magic(bytes, path)?;
    if magic != EMB_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: EMB_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < EMB_HEADER_LEN {
        return Err(truncated(path, EMB_HEADER_LEN as u64, bytes.len() as u64));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = EMB_HEADER_LEN as u64 + 4 * rows as u64 * cols as u64;
    if bytes.len() as u64 != expected {
        return Err(truncated(path, expected, bytes.len() as u64));
    }
    let data: Vec<f32> = bytes[EMB_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue {
            row: pos / cols.max(1),
            col: pos % cols.max(1),
        });
    }
    Ok(RawMatrix { rows, cols, data })
}

pub fn encode_labels(ids: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(LBL_HEADER_LEN + 4 * ids.len());
    out.extend_from_slice(&LBL_MAGIC);
    out.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for id in ids {
        out.extend_from_slice(&id.to_le_bytes());
    }
    out
}

pub fn decode_labels(bytes: &[u8], path: &Path) -> Result<Vec<u32>> {
    let magic = read_magic(bytes, path)?;
    if magic != LBL_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: LBL_MAGIC,
            found: magic,
        });
    }
    if bytes.len() < LBL_HEADER_LEN {
        return Err(truncated(path, LBL_HEADER_LEN as u64, bytes.len() as u64));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as u64;
    let expected = LBL_HEADER_LEN as u64 + 4 * n;
    if bytes.len() as u64 != expected {
        return Err(truncated(path, expected, bytes.len() as u64));
    }
    Ok(bytes[LBL_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn read_emb_file(path: &Path) -> Result<RawMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_emb(&bytes, path)
}

pub fn write_emb_file(path: &Path, rows: usize, cols: usize, data: &[f32]) -> Result<()> {
    fs::write(path, encode_emb(rows, cols, data)).map_err(|e| Error::io(path, e))
}

fn read_magic(bytes: &[u8], path: &Path) -> Result<[u8; 4]> {
    if bytes.len() < 4 {
        let mut found = [0u8; 4];
        found[..bytes.len()].copy_from_slice(bytes);
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: EMB_MAGIC,
            found,
        });
    }
    Ok(bytes[..4].try_into().unwrap())
}

fn truncated(path: &Path, expected: u64, found: u64) -> Error {
    Error::TruncatedPayload {
        path: path.to_path_buf(),
        expected,
        found,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_two_is_twenty_bytes() {
        let bytes = encode_emb(1, 2, &[1.0, 0.0]);
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[..4], b"EMB1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1.0f32.to_le_bytes());
    }

    #[test]
    fn header_declaring_more_than_payload_is_truncated() {
        let mut bytes = encode_emb(2, 3, &[0.5; 6]);
        bytes.truncate(EMB_HEADER_LEN + 20);
        match decode_emb(&bytes, Path::new("x.emb")) {
            Err(Error::TruncatedPayload {
                expected, found, ..
            }) => {
                assert_eq!(expected, 12 + 24);
                assert_eq!(found, 12 + 20);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode_emb(1, 2, &[1.0, 0.0]);
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            decode_emb(&bytes, Path::new("x")),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(
            decode_emb(b"EM", Path::new("x")),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn non_finite_payload_rejected() {
        let bytes = encode_emb(1, 2, &[1.0, f32::NAN]);
        assert!(matches!(
            decode_emb(&bytes, Path::new("x")),
            Err(Error::NonFiniteValue { row: 0, col: 1 })
        ));
    }

    #[test]
    fn labels_round_trip() {
        let ids = vec![3, 1, 4, 1, 5];
        let bytes = encode_labels(&ids);
        assert_eq!(bytes.len(), 8 + 20);
        assert_eq!(decode_labels(&bytes, Path::new("l")).unwrap(), ids);
        assert!(matches!(
            decode_labels(&bytes[..10], Path::new("l")),
            Err(Error::TruncatedPayload { .. })
        ));
    }
}
