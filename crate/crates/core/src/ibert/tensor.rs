use std::io::{Read, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IbertError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("INT32 overflow in {0}")]
    Overflow(&'static str),
    #[error("sequence length {m} exceeds the maximum of {max}")]
    TooLong { m: usize, max: usize },
    #[error("bad tensor blob: {0}")]
    Blob(String),
    #[error("model: {0}")]
    Model(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major INT8 matrix with a per-tensor dequantization scale.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantTensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i8>,
    pub scale: f64,
}

impl QuantTensor {
    pub fn new(rows: usize, cols: usize, data: Vec<i8>, scale: f64) -> Result<Self, IbertError> {
        if data.len() != rows * cols {
            return Err(IbertError::Shape(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(IbertError::Config(format!(
                "scale {scale} must be positive"
            )));
        }
        Ok(Self {
            rows,
            cols,
            data,
            scale,
        })
    }

    pub fn zeros(rows: usize, cols: usize, scale: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols],
            scale,
        }
    }

    pub fn row(&self, r: usize) -> &[i8] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> i8 {
        self.data[r * self.cols + c]
    }

    /// Columns `start..start + width` of every row.
    pub fn col_slice(&self, start: usize, width: usize) -> QuantTensor {
        let data = (0..self.rows)
            .flat_map(|r| self.row(r)[start..start + width].iter().copied())
            .collect();
        QuantTensor {
            rows: self.rows,
            cols: width,
            data,
            scale: self.scale,
        }
    }

    pub fn from_rows(rows: &[Vec<i8>], cols: usize, scale: f64) -> Result<Self, IbertError> {
        if let Some(r) = rows.iter().find(|r| r.len() != cols) {
            return Err(IbertError::Shape(format!(
                "row of {} values, expected {cols}",
                r.len()
            )));
        }
        Self::new(rows.len(), cols, rows.concat(), scale)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v as u8).collect()
    }

    pub fn row_bytes(&self, r: usize) -> Vec<u8> {
        self.row(r).iter().map(|&v| v as u8).collect()
    }
}

pub fn bytes_to_i8(b: &[u8]) -> Vec<i8> {
    b.iter().map(|&v| v as i8).collect()
}

pub fn i8_to_bytes(v: &[i8]) -> Vec<u8> {
    v.iter().map(|&x| x as u8).collect()
}

/// Row-major INT32 matrix; produced by matmuls, consumed by requantization
/// and the nonlinear kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct AccTensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i32>,
    pub scale: f64,
}

impl AccTensor {
    pub fn row(&self, r: usize) -> &[i32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> i32 {
        self.data[r * self.cols + c]
    }

    /// Join column blocks side by side, e.g. the outputs of a
    /// column-partitioned matmul.
    pub fn concat_cols(parts: &[AccTensor]) -> Result<AccTensor, IbertError> {
        let Some(first) = parts.first() else {
            return Err(IbertError::Shape("nothing to concatenate".into()));
        };
        if parts.iter().any(|p| p.rows != first.rows) {
            return Err(IbertError::Shape(
                "column blocks disagree on row count".into(),
            ));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(first.rows * cols);
        for r in 0..first.rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(AccTensor {
            rows: first.rows,
            cols,
            data,
            scale: first.scale,
        })
    }
}

pub(crate) fn checked_i32(v: i64, what: &'static str) -> Result<i32, IbertError> {
    i32::try_from(v).map_err(|_| IbertError::Overflow(what))
}

const BLOB_MAGIC: [u8; 4] = *b"GTNS";

/// Raw INT8 tensor file: 16-byte header (magic, rows, cols, reserved; all
/// little-endian u32 after the magic) followed by row-major data.
pub fn write_tensor_blob(w: &mut impl Write, t: &QuantTensor) -> Result<(), IbertError> {
    w.write_all(&BLOB_MAGIC)?;
    for v in [t.rows as u32, t.cols as u32, 0u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&t.to_bytes())?;
    Ok(())
}

/// Inverse of [`write_tensor_blob`]; the scale is not stored in the blob
/// and is supplied by the caller.
pub fn read_tensor_blob(r: &mut impl Read, scale: f64) -> Result<QuantTensor, IbertError> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)
        .map_err(|_| IbertError::Blob("shorter than the 16-byte header".into()))?;
    if head[..4] != BLOB_MAGIC {
        return Err(IbertError::Blob("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols) = (word(4), word(8));
    let mut data = Vec::new();
    r.read_to_end(&mut data)?;
    if data.len() != rows * cols {
        return Err(IbertError::Blob(format!(
            "{rows}x{cols} header but {} data bytes",
            data.len()
        )));
    }
    QuantTensor::new(rows, cols, bytes_to_i8(&data), scale)
}
