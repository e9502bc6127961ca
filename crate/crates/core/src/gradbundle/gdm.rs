//! `.gdm` matrix payload codec.
//!
//! Layout: 4-byte magic `GDM1`, `u32` rows, `u32` cols (little-endian),
//! then `rows * cols` little-endian `f32` values in row-major order.

use std::fs;
use std::path::Path;

use super::BundleError;

pub const MAGIC: [u8; 4] = *b"GDM1";
pub const HEADER_LEN: usize = 12;

/// Decoded header of a `.gdm` payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GdmHeader {
    pub rows: u32,
    pub cols: u32,
}

impl GdmHeader {
    pub fn payload_len(&self) -> Option<usize> {
        (self.rows as usize)
            .checked_mul(self.cols as usize)?
            .checked_mul(4)?
            .checked_add(HEADER_LEN)
    }
}

/// A decoded row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GdmMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

pub fn decode_header(bytes: &[u8]) -> Result<GdmHeader, BundleError> {
    if bytes.len() < HEADER_LEN {
        return Err(BundleError::Decode(format!(
            "header needs {HEADER_LEN} bytes, got {}",
            bytes.len()
        )));
    }
    if bytes[..4] != MAGIC {
        return Err(BundleError::Decode(format!(
            "bad magic {:02x?}, expected GDM1",
            &bytes[..4]
        )));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    Ok(GdmHeader { rows, cols })
}

/// Decodes a complete `.gdm` byte buffer. Rejects empty shapes, length
/// mismatches and non-finite values.
pub fn decode(bytes: &[u8]) -> Result<GdmMatrix, BundleError> {
    let header = decode_header(bytes)?;
    if header.rows == 0 || header.cols == 0 {
        return Err(BundleError::Decode(format!(
            "empty shape {}x{}",
            header.rows, header.cols
        )));
    }
    let expected = header
        .payload_len()
        .ok_or_else(|| BundleError::Decode("shape overflows addressable size".into()))?;
    if bytes.len() != expected {
        return Err(BundleError::ShapeMismatch(format!(
            "header declares {}x{} ({expected} bytes), payload has {} bytes",
            header.rows,
            header.cols,
            bytes.len()
        )));
    }
    let cols = header.cols as usize;
    let mut data = Vec::with_capacity(header.rows as usize * cols);
    for (idx, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(BundleError::NonFinite {
                location: format!("row {}, col {}", idx / cols, idx % cols),
            });
        }
        data.push(v);
    }
    Ok(GdmMatrix {
        rows: header.rows as usize,
        cols,
        data,
    })
}

pub fn encode(rows: usize, cols: usize, data: &[f32]) -> Result<Vec<u8>, BundleError> {
    if rows == 0 || cols == 0 {
        return Err(BundleError::Invalid(format!("empty shape {rows}x{cols}")));
    }
    if rows * cols != data.len() {
        return Err(BundleError::Invalid(format!(
            "shape {rows}x{cols} does not match {} values",
            data.len()
        )));
    }
    let rows32 = u32::try_from(rows).map_err(|_| BundleError::Invalid("rows exceed u32".into()))?;
    let cols32 = u32::try_from(cols).map_err(|_| BundleError::Invalid("cols exceed u32".into()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * data.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&rows32.to_le_bytes());
    out.extend_from_slice(&cols32.to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn read_file(path: &Path) -> Result<GdmMatrix, BundleError> {
    let bytes = fs::read(path).map_err(|e| BundleError::io(path, e))?;
    decode(&bytes).map_err(|e| e.in_file(path))
}

pub fn write_file(path: &Path, rows: usize, cols: usize, data: &[f32]) -> Result<(), BundleError> {
    let bytes = encode(rows, cols, data)?;
    fs::write(path, bytes).map_err(|e| BundleError::io(path, e))
}

/// Stores an `f64` matrix at `.gdm` precision (row-major `f32`).
pub fn write_dmatrix(path: &Path, m: &nalgebra::DMatrix<f64>) -> Result<(), BundleError> {
    let data: Vec<f32> = (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
        .map(|(i, j)| m[(i, j)] as f32)
        .collect();
    write_file(path, m.nrows(), m.ncols(), &data)
}

pub fn read_dmatrix(path: &Path) -> Result<nalgebra::DMatrix<f64>, BundleError> {
    let m = read_file(path)?;
    Ok(nalgebra::DMatrix::from_row_iterator(
        m.rows,
        m.cols,
        m.data.iter().map(|&v| v as f64),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_layout_is_fixed() {
        let bytes = encode(1, 2, &[1.0, -2.5]).unwrap();
        assert_eq!(&bytes[..4], b"GDM1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 20);
    }

    #[test]
    fn truncated_payload_is_shape_mismatch() {
        let bytes = encode(3, 4, &[0.5; 12]).unwrap();
        let err = decode(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(matches!(err, BundleError::ShapeMismatch(_)), "{err}");
    }

    #[test]
    fn zero_rows_rejected() {
        let mut bytes = encode(1, 1, &[1.0]).unwrap();
        bytes[4..8].copy_from_slice(&0u32.to_le_bytes());
        assert!(decode(&bytes[..12]).is_err());
    }

    #[test]
    fn nan_rejected_with_location() {
        let bytes = encode(2, 2, &[0.0, 1.0, f32::NAN, 2.0]).unwrap();
        match decode(&bytes) {
            Err(BundleError::NonFinite { location }) => assert_eq!(location, "row 1, col 0"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn huge_header_does_not_allocate() {
        let mut bytes = b"GDM1".to_vec();
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode(&bytes).is_err());
    }
}
