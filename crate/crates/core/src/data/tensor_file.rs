//! Minimal binary tensor container.
//!
//! ```text
//! {"dtype":"f32","shape":[C,H,W],"byte_order":"little-endian"}\n
//! 0x00
//! <C·H·W little-endian f32 values, row-major>
//! ```
//!
//! The header is one line of compact JSON. The sentinel byte after the
//! newline guards against text-mode mangling.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SENTINEL: u8 = 0x00;
const MAX_HEADER: usize = 4096;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
    byte_order: String,
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let header = Header {
        dtype: "f32".into(),
        shape: t.shape().to_vec(),
        byte_order: "little-endian".into(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.push(SENTINEL);
    out.reserve(4 * t.len());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let malformed = |detail: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        detail: detail.into(),
    };
    let nl = bytes
        .iter()
        .take(MAX_HEADER)
        .position(|&b| b == b'\n')
        .ok_or_else(|| malformed("no newline-terminated header"))?;
    let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| malformed(&e.to_string()))?;
    if header.dtype != "f32" {
        return Err(malformed(&format!("unsupported dtype `{}`", header.dtype)));
    }
    if header.byte_order != "little-endian" {
        return Err(malformed(&format!("unsupported byte order `{}`", header.byte_order)));
    }
    if bytes.get(nl + 1) != Some(&SENTINEL) {
        return Err(malformed("missing sentinel byte after header"));
    }
    let payload = &bytes[nl + 2..];
    let expected = 4 * header.shape.iter().product::<usize>();
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    if payload.len() != expected {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(&header.shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem")
    }

    #[test]
    fn header_layout() {
        let bytes = encode_tensor(&Tensor::zeros(&[1, 2, 2]));
        let text = br#"{"dtype":"f32","shape":[1,2,2],"byte_order":"little-endian"}"#;
        assert_eq!(&bytes[..text.len()], text);
        assert_eq!(bytes[text.len()], b'\n');
        assert_eq!(bytes[text.len() + 1], SENTINEL);
        assert_eq!(bytes.len(), text.len() + 2 + 16);
    }

    #[test]
    fn accepts_exact_payload() {
        let t = Tensor::full(&[2, 3, 3], 1.5);
        let bytes = encode_tensor(&t);
        assert_eq!(bytes.len() - bytes.iter().position(|&b| b == b'\n').unwrap() - 2, 72);
        assert_eq!(decode_tensor(&bytes, p()).unwrap(), t);
    }

    #[test]
    fn distinct_errors() {
        let mut bytes = encode_tensor(&Tensor::full(&[2, 3, 3], 1.0));
        let short = &bytes[..bytes.len() - 4];
        assert!(matches!(decode_tensor(short, p()), Err(Error::TruncatedPayload { .. })));
        bytes.extend_from_slice(&[0; 4]);
        assert!(matches!(decode_tensor(&bytes, p()), Err(Error::LengthMismatch { .. })));
        assert!(matches!(decode_tensor(b"{oops}\n\0", p()), Err(Error::MalformedHeader { .. })));
        assert!(matches!(decode_tensor(b"no newline", p()), Err(Error::MalformedHeader { .. })));
        let mut no_sentinel = encode_tensor(&Tensor::zeros(&[1]));
        let nl = no_sentinel.iter().position(|&b| b == b'\n').unwrap();
        no_sentinel[nl + 1] = 7;
        assert!(matches!(decode_tensor(&no_sentinel, p()), Err(Error::MalformedHeader { .. })));
    }
}
