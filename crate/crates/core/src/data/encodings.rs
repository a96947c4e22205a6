//! PFCE text-encoding files.
//!
//! Layout (little-endian): magic `PFCE`, u32 version (= 1), u64 item count,
//! u32 dim, then `item_count * dim` f32 values, row-major.

use std::path::Path;

use ndarray::Array2;

use crate::binio::{read_file, write_file, Reader, Writer};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PFCE";
const VERSION: u32 = 1;

/// One text-encoding row per item.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncodingMatrix {
    pub rows: Array2<f64>,
}

impl TextEncodingMatrix {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("text encoding".into()));
        }
        Ok(TextEncodingMatrix { rows })
    }

    pub fn item_count(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// Stacks several matrices (e.g. one per domain) into one pool.
    pub fn concat(parts: &[&TextEncodingMatrix]) -> Result<Self> {
        let dim = parts.first().map_or(0, |p| p.dim());
        if parts.iter().any(|p| p.dim() != dim) {
            return Err(Error::shape("encoding matrices differ in dim"));
        }
        let views: Vec<_> = parts.iter().map(|p| p.rows.view()).collect();
        let rows = ndarray::concatenate(ndarray::Axis(0), &views)
            .map_err(|e| Error::shape(e.to_string()))?;
        Ok(TextEncodingMatrix { rows })
    }

    /// The encodings of the given rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.item_count()) {
            return Err(Error::ItemOutOfRange {
                item: format!("encoding row {bad}"),
                count: self.item_count(),
            });
        }
        Ok(TextEncodingMatrix {
            rows: self.rows.select(ndarray::Axis(0), rows),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC)
            .u32(VERSION)
            .u64(self.item_count() as u64)
            .u32(self.dim() as u32);
        w.f32_slice(self.rows.as_standard_layout().as_slice().unwrap());
        w.buf
    }

    /// Parses a PFCE buffer; when `splits` is given the dim must divide
    /// evenly into that many sub-vectors.
    pub fn from_bytes(bytes: &[u8], splits: Option<usize>) -> Result<Self> {
        let mut r = Reader::new(bytes, "PFCE file");
        r.magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::BadVersion {
                what: "PFCE",
                version,
            });
        }
        let count = r.u64()? as usize;
        let dim = r.u32()? as usize;
        if let Some(d) = splits {
            if d == 0 || dim % d != 0 {
                return Err(Error::DimNotDivisible { dim, splits: d });
            }
        }
        let values = r.f32_vec(count.checked_mul(dim).unwrap_or(usize::MAX))?;
        r.finish()?;
        let rows = Array2::from_shape_vec((count, dim), values)
            .map_err(|e| Error::shape(e.to_string()))?;
        TextEncodingMatrix::new(rows)
    }
}

pub fn load_text_encodings(path: &Path, splits: Option<usize>) -> Result<TextEncodingMatrix> {
    TextEncodingMatrix::from_bytes(&read_file(path)?, splits)
}

pub fn write_text_encodings(path: &Path, m: &TextEncodingMatrix) -> Result<()> {
    write_file(path, &m.to_bytes())
}
