//! The global code-embedding table and the code -> item representation path.

use ndarray::{Array1, Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::coder::ItemCode;
use crate::error::{Error, Result};
use crate::nn::{tmut, tref, Parameters, TensorMut, TensorRef};

/// Half-width of the uniform initialization range.
pub const INIT_RANGE: f64 = 0.02;

/// `D x M_c x d_V` table of code embeddings. Also used to hold gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeEmbeddingTable {
    pub e: Array3<f64>,
}

impl CodeEmbeddingTable {
    /// Entries i.i.d. uniform in `[-0.02, 0.02]`; identical seeds give
    /// bit-identical tables.
    pub fn init(codebooks: usize, centroids: usize, dim: usize, seed: u64) -> Result<Self> {
        if codebooks == 0 || centroids == 0 || dim == 0 {
            return Err(Error::config("table dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = Array3::from_shape_simple_fn((codebooks, centroids, dim), || {
            rng.random_range(-INIT_RANGE..=INIT_RANGE)
        });
        Ok(CodeEmbeddingTable { e })
    }

    pub fn zeros(codebooks: usize, centroids: usize, dim: usize) -> Self {
        CodeEmbeddingTable {
            e: Array3::zeros((codebooks, centroids, dim)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        CodeEmbeddingTable {
            e: Array3::zeros(self.e.raw_dim()),
        }
    }

    /// `(D, M_c, d_V)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.e.dim()
    }

    pub fn codebooks(&self) -> usize {
        self.e.dim().0
    }

    pub fn dim(&self) -> usize {
        self.e.dim().2
    }

    pub fn as_slice(&self) -> &[f64] {
        self.e.as_slice().unwrap()
    }

    /// SHA-256 over the little-endian f64 bytes of the table.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for v in self.as_slice() {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }

    fn check_code(&self, code: &ItemCode) -> Result<()> {
        let (d, m, _) = self.shape();
        if code.0.len() != d {
            return Err(Error::shape(format!(
                "code has {} entries, table has {d} codebooks",
                code.0.len()
            )));
        }
        if let Some(&bad) = code.0.iter().find(|&&c| c >= m) {
            return Err(Error::shape(format!("code index {bad} >= {m} centroids")));
        }
        Ok(())
    }
}

impl Parameters for CodeEmbeddingTable {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut v = Vec::new();
        tref(&mut v, "code_table", &self.e);
        v
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_>> {
        let mut v = Vec::new();
        tmut(&mut v, "code_table", &mut self.e);
        v
    }
}

/// Mean of the code embeddings selected by `code`.
pub fn lookup_pool(code: &ItemCode, table: &CodeEmbeddingTable) -> Result<Array1<f64>> {
    table.check_code(code)?;
    let mut v = Array1::zeros(table.dim());
    for (k, &c) in code.0.iter().enumerate() {
        v += &table.e.slice(ndarray::s![k, c, ..]);
    }
    v /= code.0.len() as f64;
    Ok(v)
}

/// Item representation matrix (`items x d_V`), row `i` pooled from `codes[i]`.
pub fn batch_item_matrix(codes: &[ItemCode], table: &CodeEmbeddingTable) -> Result<Array2<f64>> {
    let mut v = Array2::zeros((codes.len(), table.dim()));
    for (i, code) in codes.iter().enumerate() {
        v.row_mut(i).assign(&lookup_pool(code, table)?);
    }
    Ok(v)
}

/// Routes item-representation gradients back to the table entries:
/// `grad[k, code_i[k]] += d_items[i] / D`.
pub fn scatter_item_grads(codes: &[ItemCode], d_items: &Array2<f64>, grad: &mut CodeEmbeddingTable) {
    let inv = 1.0 / grad.codebooks() as f64;
    for (i, code) in codes.iter().enumerate() {
        let row = d_items.row(i);
        if row.iter().all(|&x| x == 0.0) {
            continue;
        }
        for (k, &c) in code.0.iter().enumerate() {
            grad.e
                .slice_mut(ndarray::s![k, c, ..])
                .scaled_add(inv, &row);
        }
    }
}
