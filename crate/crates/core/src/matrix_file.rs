//! Raw matrix files (`EFMT`): token matrices and projection weights dumped
//! from a backbone layer.
//!
//! Layout: magic `"EFMT"`, version `u32 = 1`, rows `u64`, cols `u64`, then
//! `rows * cols` little-endian f32 values in row-major order.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::linalg::Matrix;

pub const MAGIC: [u8; 4] = *b"EFMT";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;

#[derive(Debug, Error)]
pub enum MatrixFileError {
    #[error("bad magic {found:?}, expected \"EFMT\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported matrix file version {0}")]
    UnsupportedVersion(u32),
    #[error("matrix shape {rows}x{cols} is too large")]
    Shape { rows: u64, cols: u64 },
    #[error("truncated matrix file: expected {expected} data bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("unexpected trailing bytes after matrix data")]
    TrailingBytes,
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_matrix<W: Write>(m: &Matrix, mut sink: W) -> Result<u64, MatrixFileError> {
    let mut buf = Vec::with_capacity(HEADER_LEN + m.as_slice().len() * 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(buf.len() as u64)
}

pub fn read_matrix<R: Read>(mut source: R) -> Result<Matrix, MatrixFileError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match source.read(&mut header[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    if filled >= 4 && header[..4] != MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&header[..4]);
        return Err(MatrixFileError::BadMagic { found });
    }
    if filled < HEADER_LEN {
        return Err(MatrixFileError::Truncated {
            expected: HEADER_LEN as u64,
            found: filled as u64,
        });
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(MatrixFileError::UnsupportedVersion(version));
    }
    let rows = u64::from_le_bytes(header[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(header[16..24].try_into().unwrap());
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .filter(|&n| usize::try_from(n).is_ok())
        .ok_or(MatrixFileError::Shape { rows, cols })?;

    let mut data = Vec::new();
    (&mut source).take(expected).read_to_end(&mut data)?;
    if (data.len() as u64) < expected {
        return Err(MatrixFileError::Truncated {
            expected,
            found: data.len() as u64,
        });
    }
    let mut probe = [0u8; 1];
    if source.read(&mut probe)? != 0 {
        return Err(MatrixFileError::TrailingBytes);
    }
    let values = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Matrix::from_vec(rows as usize, cols as usize, values).ok_or(MatrixFileError::Shape { rows, cols })
}
